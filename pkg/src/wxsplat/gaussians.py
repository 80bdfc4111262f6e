"""Explicit 3D Gaussian scene representation and differentiable rasterizer.

The scene is a structure-of-arrays cloud of anisotropic Gaussians (position,
per-axis log scale, unit quaternion, opacity logit, RGB color). Rendering
projects each Gaussian through a pinhole camera, sorts fragments front to
back by camera-space z, and alpha-blends inside each fragment's 3-sigma
pixel footprint. ``render_backward`` produces analytic gradients for every
parameter plus the screen-space positional gradient that drives adaptive
densification.

Parameter gradients travel as plain dicts keyed by group name
(``position``, ``scale``, ``rotation``, ``opacity``, ``color``) so the
optimizer and the gradient-scaling stage can address them uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import check_positive

ALPHA_CLAMP = 0.99
T_STOP = 1e-4          # stop blending once remaining transmittance drops below this
COV2D_FLOOR = 0.3      # px^2 low-pass floor added to the projected covariance diagonal
DEPTH_ALPHA_MIN = 1e-3 # below this coverage the depth map falls back to the far bound

PARAM_GROUPS = ("position", "scale", "rotation", "opacity", "color")

SCENE_MAGIC = b"NIMG"
SCENE_VERSION = 1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(p):
    return np.log(p / (1.0 - p))


# ---------------------------------------------------------------------------
# Quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) as (w, x, y, z) to rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_rotation_backward(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Adjoint of quat_to_rot: (N, 4), (N, 3, 3) -> gradient w.r.t. the unit quat."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_rot
    dw = 2 * (
        -z * g[:, 0, 1] + y * g[:, 0, 2]
        + z * g[:, 1, 0] - x * g[:, 1, 2]
        - y * g[:, 2, 0] + x * g[:, 2, 1]
    )
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2]
        + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2]
        + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2]
        + w * g[:, 1, 0] - 2 * z * g[:, 1, 1] + y * g[:, 1, 2]
        + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    return np.stack([dw, dx, dy, dz], axis=-1)


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Single 3x3 rotation matrix to (w, x, y, z) unit quaternion."""
    m = np.asarray(r, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rotation and pixel intrinsics."""

    position: np.ndarray            # (3,) world
    rotation: np.ndarray            # (3, 3) world -> camera, det +1
    focal: float                    # pixels
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > 1e-9:
            raise ValueError(f"camera rotation is not a proper rotation (det {det})")
        check_positive(self.focal, "focal")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")

    @classmethod
    def looking_at(cls, position, target, up, focal, width, height, **kw) -> "Camera":
        """Build a camera at ``position`` whose +z axis points toward ``target``."""
        position = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=0)
        return cls(position, rot, focal, width / 2.0, height / 2.0, width, height, **kw)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit world-space ray directions for every pixel center.

        Returns ``(dirs, z_to_t)`` flattened row-major to (H*W, 3) and
        (H*W,): ``z_to_t`` converts a camera-space z depth into distance
        along the unit ray.
        """
        js, is_ = np.meshgrid(np.arange(self.width), np.arange(self.height))
        u = js.ravel() + 0.5
        v = is_.ravel() + 0.5
        d_cam = np.stack(
            [(u - self.cx) / self.focal, (v - self.cy) / self.focal, np.ones(u.size)], axis=-1
        )
        norm = np.linalg.norm(d_cam, axis=-1)
        d_cam /= norm[:, None]
        dirs = d_cam @ self.rotation  # R^T applied row-wise
        return dirs, norm

    def to_line(self) -> str:
        q = rot_to_quat(self.rotation)
        vals = [*self.position, *q, self.focal, self.cx, self.cy, self.width, self.height]
        return " ".join(repr(float(x)) for x in vals[:10]) + f" {self.width} {self.height}"


def save_cameras(path, cams: list[Camera]) -> None:
    """One camera per line: 3 position, 4 quaternion (w x y z), focal, cx, cy, W, H."""
    lines = [c.to_line() for c in cams]
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path, near: float = 0.01, far: float = 100.0) -> list[Camera]:
    cams = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 12:
            raise ValueError(f"camera line needs 12 fields, got {len(parts)}: {ln!r}")
        vals = [float(p) for p in parts]
        pos = np.array(vals[0:3])
        q = quat_normalize(np.array(vals[3:7])[None, :])[0]
        rot = quat_to_rot(q[None, :])[0]
        cams.append(
            Camera(pos, rot, vals[7], vals[8], vals[9], int(vals[10]), int(vals[11]), near=near, far=far)
        )
    return cams


# ---------------------------------------------------------------------------
# Gaussian cloud
# ---------------------------------------------------------------------------

@dataclass
class GaussianCloud:
    """SoA storage for the Gaussian scene parameters."""

    position: np.ndarray        # (N, 3)
    scale: np.ndarray           # (N, 3) log scales
    rotation: np.ndarray        # (N, 4) quaternion, renormalized after each step
    opacity: np.ndarray         # (N,)  pre-sigmoid logit
    color: np.ndarray           # (N, 3) RGB in [0, 1]

    def __post_init__(self):
        n = self.position.shape[0]
        self.position = np.asarray(self.position, dtype=np.float64).reshape(n, 3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(n, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(n, 4)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)

    def __len__(self) -> int:
        return self.position.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {
            "position": self.position,
            "scale": self.scale,
            "rotation": self.rotation,
            "opacity": self.opacity,
            "color": self.color,
        }

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        self.position, self.scale = p["position"], p["scale"]
        self.rotation, self.opacity, self.color = p["rotation"], p["opacity"], p["color"]

    def normalize_rotations(self) -> None:
        self.rotation = quat_normalize(self.rotation)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity)

    def world_scales(self) -> np.ndarray:
        return np.exp(self.scale)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(v.copy() for v in (self.position, self.scale, self.rotation, self.opacity, self.color)))

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.position.min(axis=0), self.position.max(axis=0)

    def save(self, path) -> None:
        n = len(self)
        flat = np.concatenate(
            [self.position, self.scale, self.rotation, self.opacity[:, None], self.color], axis=1
        )
        with open(path, "wb") as f:
            f.write(SCENE_MAGIC)
            f.write(struct.pack("<I", SCENE_VERSION))
            f.write(struct.pack("<Q", n))
            f.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        raw = Path(path).read_bytes()
        return cls.from_bytes(raw, str(path))

    def to_bytes(self) -> bytes:
        import io

        buf = io.BytesIO()
        n = len(self)
        flat = np.concatenate(
            [self.position, self.scale, self.rotation, self.opacity[:, None], self.color], axis=1
        )
        buf.write(SCENE_MAGIC)
        buf.write(struct.pack("<I", SCENE_VERSION))
        buf.write(struct.pack("<Q", n))
        buf.write(np.ascontiguousarray(flat, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, origin: str = "<bytes>") -> "GaussianCloud":
        if raw[:4] != SCENE_MAGIC:
            raise ValueError(f"{origin}: not a scene checkpoint (magic {raw[:4]!r})")
        (version,) = struct.unpack("<I", raw[4:8])
        if version != SCENE_VERSION:
            raise ValueError(f"{origin}: unsupported scene version {version}")
        (n,) = struct.unpack("<Q", raw[8:16])
        flat = np.frombuffer(raw[16 : 16 + n * 14 * 8], dtype="<f8").reshape(n, 14).copy()
        return cls(flat[:, 0:3], flat[:, 3:6], flat[:, 6:10], flat[:, 10], flat[:, 11:14])


def zero_grads(n: int) -> dict[str, np.ndarray]:
    return {
        "position": np.zeros((n, 3)),
        "scale": np.zeros((n, 3)),
        "rotation": np.zeros((n, 4)),
        "opacity": np.zeros(n),
        "color": np.zeros((n, 3)),
    }


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class Fragments:
    """Per-view projection of the visible Gaussians, sorted front to back."""

    idx: np.ndarray        # (M,) index into the cloud
    p_cam: np.ndarray      # (M, 3) camera-space centers
    depth: np.ndarray      # (M,)  camera-space z
    center: np.ndarray     # (M, 2) projected (u, v) in pixels
    cov2d: np.ndarray      # (M, 3) projected covariance (a, b, c)
    conic: np.ndarray      # (M, 3) inverse covariance (a, b, c)
    radius: np.ndarray     # (M,)  3-sigma footprint radius in pixels
    bbox: np.ndarray       # (M, 4) int pixel bounds (x0, x1, y0, y1), clipped
    opac: np.ndarray       # (M,)  activated opacity
    color: np.ndarray      # (M, 3)
    rot_mat: np.ndarray    # (M, 3, 3) quaternion rotation matrices
    q_unit: np.ndarray     # (M, 4) normalized quaternions
    q_norm: np.ndarray     # (M,)  pre-normalization quaternion norms
    exp_s: np.ndarray      # (M, 3) world-space scales
    cov_cam: np.ndarray    # (M, 3, 3) camera-space 3D covariance
    t_clamped: np.ndarray = None  # (M, 2) bool, frustum clamp active per axis
    n_total: int = 0

    def __len__(self) -> int:
        return self.idx.shape[0]


def project(cloud: GaussianCloud, cam: Camera) -> Fragments:
    """Project every Gaussian; keep those in front of the near plane whose
    3-sigma footprint overlaps the image."""
    for name, arr in cloud.params().items():
        if not np.all(np.isfinite(arr)):
            raise RuntimeError(f"projection with non-finite {name} parameters")

    n = len(cloud)
    rel = cloud.position - cam.position
    p_cam = rel @ cam.rotation.T
    z = p_cam[:, 2]
    vis = z > cam.near

    f = cam.focal
    # Projected centers for the visible subset.
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(vis, f * p_cam[:, 0] / z + cam.cx, 0.0)
        v = np.where(vis, f * p_cam[:, 1] / z + cam.cy, 0.0)

    keep = np.flatnonzero(vis)
    p_cam = p_cam[keep]
    z = z[keep]
    u = u[keep]
    v = v[keep]

    q_raw = cloud.rotation[keep]
    q_norm = np.linalg.norm(q_raw, axis=1)
    q_unit = q_raw / q_norm[:, None]
    rot = quat_to_rot(q_unit)
    exp_s = np.exp(cloud.scale[keep])
    vmat = rot * exp_s[:, None, :]
    cov_w = np.einsum("nik,njk->nij", vmat, vmat)
    wr = cam.rotation
    cov_cam = np.einsum("ab,nbc,dc->nad", wr, cov_w, wr)

    x, y = p_cam[:, 0], p_cam[:, 1]
    inv_z = 1.0 / z
    # The local-affine Jacobian uses frustum-clamped view coordinates: a
    # center far outside the frustum otherwise yields an absurdly stretched
    # footprint that smears across the whole image.
    lim_x = 1.3 * (cam.width / 2.0) / f
    lim_y = 1.3 * (cam.height / 2.0) / f
    tx = np.clip(x * inv_z, -lim_x, lim_x)
    ty = np.clip(y * inv_z, -lim_y, lim_y)
    clamped = np.stack([np.abs(x * inv_z) > lim_x, np.abs(y * inv_z) > lim_y], axis=-1)
    j00 = f * inv_z
    j02 = -f * tx * inv_z
    j12 = -f * ty * inv_z
    # cov2d = J cov_cam J^T with J = [[j00, 0, j02], [0, j00, j12]]
    c00, c01, c02 = cov_cam[:, 0, 0], cov_cam[:, 0, 1], cov_cam[:, 0, 2]
    c11, c12, c22 = cov_cam[:, 1, 1], cov_cam[:, 1, 2], cov_cam[:, 2, 2]
    a = j00 * (j00 * c00 + j02 * c02) + j02 * (j00 * c02 + j02 * c22) + COV2D_FLOOR
    b = j00 * (j00 * c01 + j02 * c12) + j12 * (j00 * c02 + j02 * c22)
    c = j00 * (j00 * c11 + j12 * c12) + j12 * (j00 * c12 + j12 * c22) + COV2D_FLOOR

    det = a * c - b * b
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    x0 = np.clip(np.floor(u - radius), 0, cam.width).astype(np.int64)
    x1 = np.clip(np.ceil(u + radius), 0, cam.width).astype(np.int64)
    y0 = np.clip(np.floor(v - radius), 0, cam.height).astype(np.int64)
    y1 = np.clip(np.ceil(v + radius), 0, cam.height).astype(np.int64)
    on_image = (x1 > x0) & (y1 > y0) & (det > 0)

    keep2 = np.flatnonzero(on_image)
    det = det[keep2]
    conic = np.stack([c[keep2] / det, -b[keep2] / det, a[keep2] / det], axis=-1)

    order = np.argsort(z[keep2], kind="stable")
    sel = keep2[order]

    frag = Fragments(
        idx=keep[sel],
        p_cam=p_cam[sel],
        depth=z[sel],
        center=np.stack([u[sel], v[sel]], axis=-1),
        cov2d=np.stack([a[sel], b[sel], c[sel]], axis=-1),
        conic=conic[order],
        radius=radius[sel],
        bbox=np.stack([x0[sel], x1[sel], y0[sel], y1[sel]], axis=-1),
        opac=sigmoid(cloud.opacity[keep[sel]]),
        color=cloud.color[keep[sel]].copy(),
        rot_mat=rot[sel],
        q_unit=q_unit[sel],
        q_norm=q_norm[sel],
        exp_s=exp_s[sel],
        cov_cam=cov_cam[sel],
        t_clamped=clamped[sel],
        n_total=n,
    )
    return frag


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass
class RenderResult:
    image: np.ndarray       # (H, W, 3) blended color
    alpha_map: np.ndarray   # (H, W) accumulated alpha
    depth_map: np.ndarray   # (H, W) expected depth, far where uncovered
    wdepth: np.ndarray      # (H, W) alpha-weighted depth sum (pre-normalization)
    frags: Fragments | None
    cam: Camera = field(repr=False, default=None)


def _frag_block(frag: Fragments, m: int):
    x0, x1, y0, y1 = frag.bbox[m]
    dx = (np.arange(x0, x1) + 0.5) - frag.center[m, 0]
    dy = (np.arange(y0, y1) + 0.5) - frag.center[m, 1]
    ca, cb, cc = frag.conic[m]
    power = (
        -0.5 * ca * dx[None, :] ** 2
        - cb * dy[:, None] * dx[None, :]
        - 0.5 * cc * dy[:, None] ** 2
    )
    g = np.exp(power)
    alpha = np.minimum(frag.opac[m] * g, ALPHA_CLAMP)
    return (slice(y0, y1), slice(x0, x1)), dx, dy, g, alpha


def render_forward(cloud: GaussianCloud, cam: Camera) -> RenderResult:
    """Front-to-back alpha blending of the projected Gaussians.

    Returns the blended image plus the accumulated-alpha map and the
    alpha-weighted expected depth (the ray-march far bound for the
    scattering stage; uncovered pixels fall back to ``cam.far``).
    """
    if len(cloud) == 0:
        raise ValueError("render: scene has no Gaussians")
    frag = project(cloud, cam)
    h, w = cam.height, cam.width
    image = np.zeros((h, w, 3))
    tbuf = np.ones((h, w))
    wdepth = np.zeros((h, w))

    for m in range(len(frag)):
        sl, _, _, _, alpha = _frag_block(frag, m)
        tt = tbuf[sl]
        active = tt >= T_STOP
        wgt = np.where(active, tt * alpha, 0.0)
        image[sl] += wgt[:, :, None] * frag.color[m]
        wdepth[sl] += wgt * frag.depth[m]
        tbuf[sl] = np.where(active, tt * (1.0 - alpha), tt)

    alpha_map = 1.0 - tbuf
    covered = alpha_map >= DEPTH_ALPHA_MIN
    depth_map = np.where(covered, wdepth / np.where(covered, alpha_map, 1.0), cam.far)
    return RenderResult(image, alpha_map, depth_map, wdepth, frag, cam)


def render(cloud: GaussianCloud, cam: Camera):
    """Convenience wrapper returning just (image, alpha, depth)."""
    res = render_forward(cloud, cam)
    return res.image, res.alpha_map, res.depth_map


def render_backward(
    res: RenderResult,
    d_image: np.ndarray,
    d_alpha: np.ndarray | None = None,
    d_depth: np.ndarray | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Analytic reverse pass of :func:`render_forward`.

    Takes adjoints of the rendered image and optionally of the alpha and
    depth maps; returns per-parameter gradients plus the per-Gaussian
    screen-space positional gradient (N, 2) used by densification, in
    half-image units.
    """
    if res is None or res.frags is None:
        raise RuntimeError("render_backward: no cached forward pass")
    frag = res.frags
    cam = res.cam
    n = frag.n_total
    grads = zero_grads(n)
    screen = np.zeros((n, 2))
    m_count = len(frag)
    if m_count == 0:
        return grads, screen

    h, w = cam.height, cam.width
    d_image = np.asarray(d_image, dtype=np.float64).reshape(h, w, 3)
    alpha_map = res.alpha_map
    covered = alpha_map >= DEPTH_ALPHA_MIN

    dwd = np.zeros((h, w))
    da_eff = np.zeros((h, w))
    if d_alpha is not None:
        da_eff += np.asarray(d_alpha, dtype=np.float64).reshape(h, w)
    if d_depth is not None:
        dd_map = np.asarray(d_depth, dtype=np.float64).reshape(h, w)
        safe_a = np.where(covered, alpha_map, 1.0)
        dwd += np.where(covered, dd_map / safe_a, 0.0)
        da_eff += np.where(covered, -dd_map * res.wdepth / safe_a**2, 0.0)

    # Pass 1: total adjoint-weighted blend mass per pixel.
    gw_total = np.zeros((h, w))
    tbuf = np.ones((h, w))
    for m in range(m_count):
        sl, _, _, _, alpha = _frag_block(frag, m)
        tt = tbuf[sl]
        active = tt >= T_STOP
        wgt = np.where(active, tt * alpha, 0.0)
        gblk = d_image[sl] @ frag.color[m] + da_eff[sl] + dwd[sl] * frag.depth[m]
        gw_total[sl] += gblk * wgt
        tbuf[sl] = np.where(active, tt * (1.0 - alpha), tt)

    # Pass 2: per-fragment adjoints.
    d_color = np.zeros((m_count, 3))
    d_opac = np.zeros(m_count)
    d_conic = np.zeros((m_count, 3))
    d_uv = np.zeros((m_count, 2))
    d_depth_f = np.zeros(m_count)
    tbuf = np.ones((h, w))
    accum = np.zeros((h, w))
    for m in range(m_count):
        sl, dx, dy, g, alpha = _frag_block(frag, m)
        tt = tbuf[sl]
        active = tt >= T_STOP
        wgt = np.where(active, tt * alpha, 0.0)
        dimg = d_image[sl]
        gblk = dimg @ frag.color[m] + da_eff[sl] + dwd[sl] * frag.depth[m]
        accum[sl] += gblk * wgt
        suffix = gw_total[sl] - accum[sl]
        d_alpha_blk = np.where(active, tt * gblk - suffix / (1.0 - alpha), 0.0)

        d_color[m] = np.einsum("yx,yxc->c", wgt, dimg)
        d_depth_f[m] = float(np.sum(dwd[sl] * wgt))

        unclamped = frag.opac[m] * g < ALPHA_CLAMP
        d_og = np.where(unclamped, d_alpha_blk, 0.0)
        d_opac[m] = float(np.sum(g * d_og))
        d_pow = frag.opac[m] * g * d_og

        dx2 = dx[None, :] ** 2
        dy2 = dy[:, None] ** 2
        dxdy = dy[:, None] * dx[None, :]
        d_conic[m, 0] = float(np.sum(-0.5 * dx2 * d_pow))
        d_conic[m, 1] = float(np.sum(-dxdy * d_pow))
        d_conic[m, 2] = float(np.sum(-0.5 * dy2 * d_pow))
        ca, cb, cc = frag.conic[m]
        d_uv[m, 0] = float(np.sum((ca * dx[None, :] + cb * dy[:, None]) * d_pow))
        d_uv[m, 1] = float(np.sum((cb * dx[None, :] + cc * dy[:, None]) * d_pow))

        tbuf[sl] = np.where(active, tt * (1.0 - alpha), tt)

    # Fragment-level chains, vectorized over fragments.
    f = cam.focal
    x, y, z = frag.p_cam[:, 0], frag.p_cam[:, 1], frag.p_cam[:, 2]
    inv_z = 1.0 / z

    # conic = inv(cov2d): d_cov2d = -conic @ G @ conic with G the
    # independent-entry adjoint of the symmetric conic parameters.
    cmat = np.zeros((m_count, 2, 2))
    cmat[:, 0, 0], cmat[:, 0, 1] = frag.conic[:, 0], frag.conic[:, 1]
    cmat[:, 1, 0], cmat[:, 1, 1] = frag.conic[:, 1], frag.conic[:, 2]
    gc = np.zeros((m_count, 2, 2))
    gc[:, 0, 0] = d_conic[:, 0]
    gc[:, 0, 1] = gc[:, 1, 0] = 0.5 * d_conic[:, 1]
    gc[:, 1, 1] = d_conic[:, 2]
    d_cov_m = -np.einsum("nij,njk,nkl->nil", cmat, gc, cmat)

    g2 = 0.5 * (d_cov_m + np.transpose(d_cov_m, (0, 2, 1)))  # symmetric adjoint

    lim_x = 1.3 * (cam.width / 2.0) / f
    lim_y = 1.3 * (cam.height / 2.0) / f
    tx = np.clip(x * inv_z, -lim_x, lim_x)
    ty = np.clip(y * inv_z, -lim_y, lim_y)
    cl_x = frag.t_clamped[:, 0]
    cl_y = frag.t_clamped[:, 1]

    jmat = np.zeros((m_count, 2, 3))
    jmat[:, 0, 0] = f * inv_z
    jmat[:, 0, 2] = -f * tx * inv_z
    jmat[:, 1, 1] = f * inv_z
    jmat[:, 1, 2] = -f * ty * inv_z

    d_cov_cam = np.einsum("nji,njk,nkl->nil", jmat, g2, jmat)
    d_j = 2.0 * np.einsum("nij,njk,nkl->nil", g2, jmat, frag.cov_cam)

    d_pcam = np.zeros((m_count, 3))
    d_pcam[:, 0] += d_j[:, 0, 2] * np.where(cl_x, 0.0, -f * inv_z**2)
    d_pcam[:, 1] += d_j[:, 1, 2] * np.where(cl_y, 0.0, -f * inv_z**2)
    d_pcam[:, 2] += (d_j[:, 0, 0] + d_j[:, 1, 1]) * (-f * inv_z**2)
    d_pcam[:, 2] += d_j[:, 0, 2] * np.where(cl_x, f * tx * inv_z**2, 2.0 * f * x * inv_z**3)
    d_pcam[:, 2] += d_j[:, 1, 2] * np.where(cl_y, f * ty * inv_z**2, 2.0 * f * y * inv_z**3)

    # Projected center and depth paths.
    d_pcam[:, 0] += d_uv[:, 0] * f * inv_z
    d_pcam[:, 1] += d_uv[:, 1] * f * inv_z
    d_pcam[:, 2] += -f * inv_z**2 * (d_uv[:, 0] * x + d_uv[:, 1] * y)
    d_pcam[:, 2] += d_depth_f

    wr = cam.rotation
    d_mu = d_pcam @ wr
    d_cov_w = np.einsum("ba,nbc,cd->nad", wr, d_cov_cam, wr)

    # cov_w = V V^T with V = R diag(exp(s)).
    sym = d_cov_w + np.transpose(d_cov_w, (0, 2, 1))
    vmat = frag.rot_mat * frag.exp_s[:, None, :]
    d_v = np.einsum("nij,njk->nik", sym, vmat)
    d_rot = d_v * frag.exp_s[:, None, :]
    d_log_s = frag.exp_s * np.einsum("nik,nik->nk", frag.rot_mat, d_v)

    d_qunit = quat_rotation_backward(frag.q_unit, d_rot)
    dot = np.einsum("ni,ni->n", frag.q_unit, d_qunit)
    d_quat = (d_qunit - frag.q_unit * dot[:, None]) / frag.q_norm[:, None]

    d_logit = frag.opac * (1.0 - frag.opac) * d_opac

    idx = frag.idx
    grads["position"][idx] = d_mu
    grads["scale"][idx] = d_log_s
    grads["rotation"][idx] = d_quat
    grads["opacity"][idx] = d_logit
    grads["color"][idx] = d_color
    screen[idx, 0] = d_uv[:, 0] * (cam.width / 2.0)
    screen[idx, 1] = d_uv[:, 1] * (cam.height / 2.0)
    return grads, screen


# ---------------------------------------------------------------------------
# Adaptive density control
# ---------------------------------------------------------------------------

@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4
    scale_split_threshold: float = 0.02   # world units
    opacity_prune_threshold: float = 0.005
    interval: int = 100
    max_gaussians: int = 20000

    def __post_init__(self):
        check_positive(self.grad_threshold, "grad_threshold")
        check_positive(self.scale_split_threshold, "scale_split_threshold")
        check_positive(self.opacity_prune_threshold, "opacity_prune_threshold")
        check_positive(self.interval, "interval")


SPLIT_SCALE_DIVISOR = 1.6


@dataclass
class DensifyOutcome:
    cloud: GaussianCloud
    src_index: np.ndarray     # (N_new,) parent row in the old cloud
    fresh_mask: np.ndarray    # (N_new,) True where optimizer moments restart at zero
    n_cloned: int
    n_split: int
    n_pruned: int
    triggered: np.ndarray     # old-cloud indices that were densified, acceptance order


def densify_and_prune(
    cloud: GaussianCloud,
    grad_accum: np.ndarray,
    denom: np.ndarray,
    cfg: DensifyConfig,
    rng: np.random.Generator,
) -> DensifyOutcome:
    """Clone or split high-gradient Gaussians and prune transparent ones.

    Gaussians whose mean accumulated screen-space gradient reaches
    ``grad_threshold`` are cloned when small (max world scale below the
    split threshold) or split into two children with scales divided by
    1.6. Candidates are accepted in descending-gradient order until
    ``max_gaussians`` would be exceeded. Gaussians with activated opacity
    below the prune threshold are dropped.
    """
    n = len(cloud)
    if grad_accum.shape[0] != n or denom.shape[0] != n:
        raise ValueError("densify: accumulator size does not match scene size")

    mean_grad = grad_accum / np.maximum(denom, 1.0)
    prune = cloud.opacities() < cfg.opacity_prune_threshold
    trigger = (mean_grad >= cfg.grad_threshold) & ~prune
    max_ws = cloud.world_scales().max(axis=1)
    wants_split = trigger & (max_ws >= cfg.scale_split_threshold)

    count = int(n - prune.sum())
    cand = np.flatnonzero(trigger)
    cand = cand[np.argsort(-mean_grad[cand], kind="stable")]
    accept_clone, accept_split = [], []
    for i in cand:
        if count + 1 > cfg.max_gaussians:
            continue
        if wants_split[i]:
            accept_split.append(i)
        else:
            accept_clone.append(i)
        count += 1

    split_set = np.zeros(n, dtype=bool)
    split_set[accept_split] = True
    survivors = np.flatnonzero(~prune & ~split_set)

    src = [survivors]
    fresh = [np.zeros(survivors.size, dtype=bool)]
    pieces = {k: [v[survivors]] for k, v in cloud.params().items()}

    if accept_clone:
        ci = np.asarray(accept_clone)
        for k, v in cloud.params().items():
            pieces[k].append(v[ci].copy())
        src.append(ci)
        fresh.append(np.zeros(ci.size, dtype=bool))

    if accept_split:
        si = np.asarray(accept_split)
        rot = quat_to_rot(quat_normalize(cloud.rotation[si]))
        sigma = np.exp(cloud.scale[si])
        child_scale = cloud.scale[si] - np.log(SPLIT_SCALE_DIVISOR)
        for _ in range(2):
            noise = rng.standard_normal((si.size, 3))
            offset = np.einsum("nij,nj->ni", rot, sigma * noise)
            pieces["position"].append(cloud.position[si] + offset)
            pieces["scale"].append(child_scale.copy())
            pieces["rotation"].append(cloud.rotation[si].copy())
            pieces["opacity"].append(cloud.opacity[si].copy())
            pieces["color"].append(cloud.color[si].copy())
            src.append(si)
            fresh.append(np.ones(si.size, dtype=bool))

    new_cloud = GaussianCloud(**{k: np.concatenate(v, axis=0) for k, v in pieces.items()})
    if not np.all(np.isfinite(new_cloud.position)):
        raise RuntimeError("densify produced non-finite positions")
    triggered = np.concatenate([np.asarray(accept_clone, dtype=np.int64), np.asarray(accept_split, dtype=np.int64)])
    return DensifyOutcome(
        cloud=new_cloud,
        src_index=np.concatenate(src),
        fresh_mask=np.concatenate(fresh),
        n_cloned=len(accept_clone),
        n_split=len(accept_split),
        n_pruned=int(prune.sum()),
        triggered=triggered,
    )
