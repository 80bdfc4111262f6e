"""Synthetic ground-truth factory.

Builds small procedural scenes with known Gaussians and a ring of cameras,
renders clean views plus true depth with the package's own renderer (so the
reconstruction target is exactly representable), then degrades the views
with parameterized haze, rain, and snow. Haze follows the standard
atmospheric scattering model on the true depth; particles are strictly
additive bright strokes with per-view seeds, so they are view-inconsistent
by construction. Everything regenerates bit-identically from the manifest.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .gaussians import Camera, GaussianCloud, inverse_sigmoid, render_forward, save_cameras
from .imaging import read_png, read_raw, write_png, write_raw
from .trainer import View
from .validation import DataError, worker_count

PRESETS = ("H", "R", "S", "H+R", "H+S", "R+S", "H+R+S")

PALETTE = np.array(
    [
        [0.85, 0.30, 0.25],
        [0.25, 0.55, 0.85],
        [0.95, 0.75, 0.20],
        [0.35, 0.75, 0.40],
        [0.75, 0.35, 0.75],
        [0.90, 0.55, 0.35],
    ]
)


@dataclass
class SceneSpec:
    seed: int = 0
    n_gaussians: int = 220
    extent: float = 1.2
    cam_count: int = 8
    cam_radius: float = 3.2
    cam_elevation: float = 0.30
    resolution: int = 64
    variant: str = "default"   # "default" or "spread" (adds detailed far content)

    def __post_init__(self):
        if self.cam_count < 2:
            raise ValueError("scene needs at least 2 cameras")
        if self.variant not in ("default", "spread"):
            raise ValueError(f"unknown scene variant {self.variant!r}")


@dataclass
class WeatherSpec:
    kinds: str = ""            # canonical combination, e.g. "H+R+S"; "" is clean
    seed: int = 0
    haze_extinction: float = 0.3
    haze_airlight: tuple = (0.9, 0.9, 0.9)
    rain_count: int = 40
    rain_length: float = 12.0
    rain_angle: float = 70.0   # degrees from horizontal
    rain_width: float = 0.8
    rain_intensity: float = 0.5
    snow_count: int = 160
    snow_radius: float = 2.0
    snow_intensity: float = 0.8

    def __post_init__(self):
        for k in self.kind_set():
            if k not in ("H", "R", "S"):
                raise ValueError(f"unknown weather kind {k!r}")
        for name in ("rain_intensity", "snow_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.haze_extinction < 0:
            raise ValueError("haze_extinction must be non-negative")

    def kind_set(self) -> set[str]:
        return set(k for k in self.kinds.split("+") if k)


@dataclass
class SceneData:
    spec: SceneSpec
    cloud: GaussianCloud
    cams: list[Camera]
    clean: list[np.ndarray]
    depth: list[np.ndarray]
    alpha: list[np.ndarray]


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------

def _quat_aligning(z_to: np.ndarray) -> np.ndarray:
    """Quaternion rotating the +z axis onto ``z_to``."""
    a = np.array([0.0, 0.0, 1.0])
    b = z_to / np.linalg.norm(z_to)
    d = float(a @ b)
    if d < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(a, b)
    q = np.array([1.0 + d, *axis])
    return q / np.linalg.norm(q)


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5**0.5) * i
    return np.stack(
        [np.sin(phi) * np.cos(theta), np.cos(phi), np.sin(phi) * np.sin(theta)], axis=-1
    )


def build_scene(spec: SceneSpec) -> SceneData:
    """Deterministic scene from the spec's seed: object clusters over a
    ground disc, enclosed by a dome shell that bounds every ray's depth."""
    rng = np.random.default_rng([spec.seed, 7])
    ext = spec.extent

    pos, scl, quat, opac, col = [], [], [], [], []

    def add(p, s, q, o, c):
        pos.append(p)
        scl.append(np.log(np.maximum(s, 1e-5)))
        quat.append(q)
        opac.append(inverse_sigmoid(o))
        col.append(np.clip(c, 0.02, 0.98))

    # Object clusters.
    n_obj = spec.n_gaussians
    n_clusters = 6
    centers = rng.uniform(-0.8, 0.8, size=(n_clusters, 3)) * ext
    centers[:, 1] = rng.uniform(-0.15, 0.45, size=n_clusters) * ext
    for i in range(n_obj):
        ci = i % n_clusters
        p = centers[ci] + rng.normal(0.0, 0.12 * ext, size=3)
        s = 0.07 * ext * rng.uniform(0.6, 1.4, size=3)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        base = PALETTE[ci % len(PALETTE)]
        add(p, s, q, 0.85, base + rng.normal(0.0, 0.06, size=3))

    # Ground disc of flattened Gaussians.
    g_side = 7
    gx, gz = np.meshgrid(np.linspace(-1.3, 1.3, g_side), np.linspace(-1.3, 1.3, g_side))
    for x, z in zip(gx.ravel(), gz.ravel()):
        p = np.array([x * ext, -0.32 * ext, z * ext])
        s = np.array([0.26 * ext, 0.02 * ext, 0.26 * ext])
        shade = 0.42 + 0.12 * float((np.floor(x * 2) + np.floor(z * 2)) % 2)
        add(p, s, np.array([1.0, 0, 0, 0]), 0.92, np.full(3, shade) + rng.normal(0, 0.02, 3))

    # Enclosing dome, well outside the camera ring. Shell Gaussians whose
    # centers pass close to a camera's near plane sit far off-axis there
    # (lateral offset >> 3 sigma), so their footprints miss the image and
    # get culled instead of washing over the view.
    r_shell = 2.5 * spec.cam_radius
    shell_dirs = _fibonacci_sphere(220)
    for d in shell_dirs:
        p = d * r_shell
        q = _quat_aligning(d)
        s = np.array([0.12 * r_shell, 0.12 * r_shell, 0.015 * r_shell])
        height = 0.5 * (d[1] + 1.0)
        c = np.array([0.30, 0.38, 0.52]) * height + np.array([0.55, 0.46, 0.38]) * (1 - height)
        add(p, s, q, 0.95, c + rng.normal(0, 0.03, 3))

    if spec.variant == "spread":
        # A band of small, high-contrast Gaussians near the shell: far detail
        # that only resolves if distant regions keep densifying.
        n_far = 90
        ang = rng.uniform(0.0, 2 * np.pi, size=n_far)
        y = rng.uniform(-0.05, 0.35, size=n_far) * r_shell
        rad = 0.82 * r_shell
        for j in range(n_far):
            p = np.array([rad * np.cos(ang[j]), y[j], rad * np.sin(ang[j])])
            s = np.full(3, 0.035 * r_shell * rng.uniform(0.7, 1.3))
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            add(p, s, q, 0.9, PALETTE[j % len(PALETTE)] + rng.normal(0, 0.05, 3))

    cloud = GaussianCloud(
        np.array(pos), np.array(scl), np.array(quat), np.array(opac), np.array(col)
    )

    res = spec.resolution
    cams = []
    for k in range(spec.cam_count):
        ang = 2 * np.pi * k / spec.cam_count
        p = np.array(
            [
                spec.cam_radius * np.cos(ang) * np.cos(spec.cam_elevation),
                spec.cam_radius * np.sin(spec.cam_elevation),
                spec.cam_radius * np.sin(ang) * np.cos(spec.cam_elevation),
            ]
        )
        cams.append(
            Camera.looking_at(p, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], focal=0.8 * res, width=res, height=res)
        )

    clean, depth, alpha = [], [], []
    for cam in cams:
        rr = render_forward(cloud, cam)
        clean.append(np.clip(rr.image, 0.0, 1.0))
        depth.append(rr.depth_map)
        alpha.append(rr.alpha_map)
    return SceneData(spec, cloud, cams, clean, depth, alpha)


# ---------------------------------------------------------------------------
# Degradations
# ---------------------------------------------------------------------------

def apply_haze(clean: np.ndarray, depth: np.ndarray, extinction: float, airlight) -> np.ndarray:
    """Standard atmospheric scattering on the true depth map."""
    if extinction < 0:
        raise ValueError("extinction must be non-negative")
    a = np.asarray(airlight, dtype=np.float64).reshape(1, 1, 3)
    t = np.exp(-extinction * np.asarray(depth, dtype=np.float64))[:, :, None]
    return clean * t + a * (1.0 - t)


def _stamp_profile(mask: np.ndarray, cy, cx, footprint, profile_fn):
    h, w = mask.shape
    y0 = max(int(np.floor(cy - footprint)), 0)
    y1 = min(int(np.ceil(cy + footprint)) + 1, h)
    x0 = max(int(np.floor(cx - footprint)), 0)
    x1 = min(int(np.ceil(cx + footprint)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.meshgrid(np.arange(y0, y1) + 0.5, np.arange(x0, x1) + 0.5, indexing="ij")
    mask[y0:y1, x0:x1] += profile_fn(xx, yy)


def rain_mask(shape, spec: WeatherSpec, rng: np.random.Generator) -> np.ndarray:
    """Anti-aliased streak field: line segments at the spec angle with up to
    5 degrees of jitter, Gaussian cross-profile."""
    h, w = shape
    mask = np.zeros((h, w))
    for _ in range(spec.rain_count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        ang = np.deg2rad(spec.rain_angle + rng.uniform(-5.0, 5.0))
        dx, dy = np.cos(ang), -np.sin(ang)
        half = spec.rain_length / 2.0
        p0 = np.array([cx - half * dx, cy - half * dy])
        p1 = np.array([cx + half * dx, cy + half * dy])
        seg = p1 - p0
        seg_len2 = float(seg @ seg)
        width = spec.rain_width

        def profile(xx, yy):
            px = xx - p0[0]
            py = yy - p0[1]
            t = np.clip((px * seg[0] + py * seg[1]) / seg_len2, 0.0, 1.0)
            d2 = (px - t * seg[0]) ** 2 + (py - t * seg[1]) ** 2
            return np.exp(-0.5 * d2 / width**2)

        _stamp_profile(mask, cy, cx, half + 3 * width, profile)
    return np.clip(mask, 0.0, 1.0)


def snow_mask(shape, spec: WeatherSpec, rng: np.random.Generator) -> np.ndarray:
    """Soft discs with Gaussian falloff and randomized radii."""
    h, w = shape
    mask = np.zeros((h, w))
    for _ in range(spec.snow_count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        r = spec.snow_radius * rng.uniform(0.6, 1.4)
        sig = r / 2.0

        def profile(xx, yy):
            d2 = (xx - cx) ** 2 + (yy - cy) ** 2
            return np.exp(-0.5 * d2 / sig**2)

        _stamp_profile(mask, cy, cx, 3 * sig, profile)
    return np.clip(mask, 0.0, 1.0)


def apply_particles(img: np.ndarray, kind: str, spec: WeatherSpec, view_seed: int):
    """Additive screen-space particles; returns (degraded, additive delta).

    The delta map is the actual brightness added after clamping, which is
    exactly what the particulate residual should absorb.
    """
    if kind == "R":
        rng = np.random.default_rng([spec.seed, 500 + view_seed, 1])
        mask = rain_mask(img.shape[:2], spec, rng)
        intensity = spec.rain_intensity
    elif kind == "S":
        rng = np.random.default_rng([spec.seed, 500 + view_seed, 2])
        mask = snow_mask(img.shape[:2], spec, rng)
        intensity = spec.snow_intensity
    else:
        raise ValueError(f"unknown particle kind {kind!r}")
    out = np.clip(img + intensity * mask[:, :, None], 0.0, 1.0)
    return out, out - img


def degrade_view(clean: np.ndarray, depth: np.ndarray, weather: WeatherSpec, view_seed: int):
    """Medium first, then particles, mirroring the degraded-image model."""
    kinds = weather.kind_set()
    img = clean
    if "H" in kinds:
        img = apply_haze(img, depth, weather.haze_extinction, weather.haze_airlight)
    delta = np.zeros_like(clean)
    for kind in ("R", "S"):
        if kind in kinds:
            img, d = apply_particles(img, kind, weather, view_seed)
            delta = delta + d
    return img, delta


# ---------------------------------------------------------------------------
# Dataset composer
# ---------------------------------------------------------------------------

def _spec_to_lines(prefix: str, spec) -> list[str]:
    lines = []
    for f_ in fields(spec):
        v = getattr(spec, f_.name)
        if isinstance(v, tuple):
            v = " ".join(repr(float(x)) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{prefix}.{f_.name} = {v}")
    return lines


def _parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for ln in text.splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        k, v = ln.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def specs_from_manifest(text: str) -> tuple[SceneSpec, WeatherSpec]:
    kv = _parse_manifest(text)
    scene_kwargs, weather_kwargs = {}, {}
    default_s = SceneSpec()
    for f_ in fields(SceneSpec):
        raw = kv[f"scene.{f_.name}"]
        like = getattr(default_s, f_.name)
        scene_kwargs[f_.name] = raw if isinstance(like, str) else type(like)(raw)
    default_w = WeatherSpec()
    for f_ in fields(WeatherSpec):
        raw = kv[f"weather.{f_.name}"]
        like = getattr(default_w, f_.name)
        if isinstance(like, tuple):
            weather_kwargs[f_.name] = tuple(float(x) for x in raw.split())
        elif isinstance(like, bool):
            weather_kwargs[f_.name] = raw.lower() == "true"
        elif isinstance(like, str):
            weather_kwargs[f_.name] = raw
        else:
            weather_kwargs[f_.name] = type(like)(raw)
    return SceneSpec(**scene_kwargs), WeatherSpec(**weather_kwargs)


def compose_dataset(scene: SceneData, weather: WeatherSpec, out_dir, overwrite: bool = False) -> Path:
    """Write the degraded dataset directory and its manifest.

    Layout: ``manifest.txt``, ``cameras.txt``, and per view ``view_<k>/``
    holding ``input.png``, ``clean.png``, ``depth.nimf``, ``mask.nimf``.
    The manifest is written last as the commit marker.
    """
    root = Path(out_dir)
    manifest_path = root / "manifest.txt"
    if manifest_path.exists() and not overwrite:
        raise DataError(f"{root}: dataset already exists (pass overwrite to replace)")
    root.mkdir(parents=True, exist_ok=True)

    n = len(scene.cams)
    # Views degrade independently; the writes below stay ordered so the
    # directory contents are identical regardless of worker count.
    with ThreadPoolExecutor(max_workers=min(worker_count(), n)) as pool:
        degraded_all = list(
            pool.map(lambda k: degrade_view(scene.clean[k], scene.depth[k], weather, k), range(n))
        )
    file_lines = [f"n_views = {n}"]
    for k in range(n):
        vdir = root / f"view_{k}"
        vdir.mkdir(exist_ok=True)
        degraded, delta = degraded_all[k]
        write_png(vdir / "input.png", degraded)
        write_png(vdir / "clean.png", scene.clean[k])
        write_raw(vdir / "depth.nimf", scene.depth[k][:, :, None])
        write_raw(vdir / "mask.nimf", delta)
        for name in ("input.png", "clean.png", "depth.nimf", "mask.nimf"):
            file_lines.append(f"file.view_{k}.{name.split('.')[0]} = view_{k}/{name}")
    save_cameras(root / "cameras.txt", scene.cams)
    file_lines.append("file.cameras = cameras.txt")

    lines = _spec_to_lines("scene", scene.spec) + _spec_to_lines("weather", weather) + file_lines
    manifest_path.write_text("\n".join(lines) + "\n")
    return root


def regenerate_dataset(manifest_path, out_dir, overwrite: bool = False) -> Path:
    """Rebuild a dataset directory from a manifest; bit-identical outputs."""
    scene_spec, weather = specs_from_manifest(Path(manifest_path).read_text())
    return compose_dataset(build_scene(scene_spec), weather, out_dir, overwrite)


# ---------------------------------------------------------------------------
# Dataset loader
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    root: Path
    views: list[View]
    clean: list[np.ndarray]
    masks: list[np.ndarray]
    manifest: dict[str, str] = field(default_factory=dict)

    @property
    def cams(self) -> list[Camera]:
        return [v.cam for v in self.views]


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.txt"
    if not manifest_path.exists():
        raise DataError(f"{root}: no dataset manifest at {manifest_path}")
    kv = _parse_manifest(manifest_path.read_text())
    n = int(kv["n_views"])
    from .gaussians import load_cameras

    cams = load_cameras(root / "cameras.txt")
    if len(cams) != n:
        raise DataError(f"{root}: camera count {len(cams)} does not match manifest n_views {n}")
    views, clean, masks = [], [], []
    for k in range(n):
        vdir = root / f"view_{k}"
        try:
            img = read_png(vdir / "input.png")
            ref = read_png(vdir / "clean.png")
            depth = read_raw(vdir / "depth.nimf")[:, :, 0]
            mask = read_raw(vdir / "mask.nimf")
        except (FileNotFoundError, ValueError) as exc:
            raise DataError(f"{root}: broken view {k}: {exc}") from exc
        views.append(View(k, img, cams[k], depth))
        clean.append(ref)
        masks.append(mask)
    return Dataset(root, views, clean, masks, kv)


def preset_weather(preset: str, seed: int = 0) -> WeatherSpec:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    return WeatherSpec(kinds=preset, seed=seed)
