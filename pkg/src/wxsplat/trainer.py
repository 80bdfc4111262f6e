"""Two-stage training loop.

Stage 1 (geometry initialization) renders the continuous-medium image per
view and optimizes every component under the stage-1 objective with the
Gaussian scale learning rate held low; no densification, residuals, or
gradient scaling. At the boundary the particulate layers are extracted once
per view. Stage 2 composes the full degraded rendering, applies
geometry-guided gradient scaling before every optimizer step, densifies on
its interval, and refreshes the residuals on the ``z_ref`` cadence (after
the parameter update, matching the published procedure).

All randomness is derived statelessly from ``(seed, stream, counter)`` so a
checkpoint resume replays the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import ggs as ggs_mod
from .gaussians import (
    Camera,
    DensifyConfig,
    GaussianCloud,
    PARAM_GROUPS,
    densify_and_prune,
    inverse_sigmoid,
    render_backward,
    render_forward,
)
from .imaging import raw_bytes, raw_from_bytes, write_raw
from .losses import LossReport, LossWeights, append_log, stage1_loss, stage2_loss
from .optim import Adam
from .particulate import ParticulateLayer, compose_degraded, extract_residual
from .scattering import AirlightNet, ExtinctionGrid, render_medium, render_medium_backward
from .validation import NumericalAbort

STREAM_VIEW_ORDER = 101
STREAM_DENSIFY = 202
STREAM_INIT = 303

CHECKPOINT_MAGIC = b"NIMC"


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    m_init: int = 200
    m_joint: int = 800
    z_ref: int = 100
    k_samples: int = 64
    r0: float = 3.0
    lambda_r: float = 0.4
    lambda_dcp: float = 1.0
    lambda_tv: float = 0.1
    dcp_patch: int = 7
    seed: int = 0
    grid_resolution: int = 32
    grid_expansion: float = 2.0
    init_points: int = 512
    random_point_frac: float = 0.1
    lr_position: float = 1.6e-4        # scaled by scene extent
    lr_position_final: float = 1.6e-6  # end of the stage-2 exponential decay
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_grid: float = 5e-3
    lr_airlight: float = 5e-4
    stage1_scale_lr: float = 2e-3
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_scale_split: float = 0.01  # fraction of scene extent
    densify_prune_opacity: float = 0.005
    densify_max: int = 20000
    densify_stage1: bool = False
    csm_enabled: bool = True
    plm_enabled: bool = True
    ggs_enabled: bool = True
    ggs_drop: str = ""
    checkpoint_interval: int = 0
    near: float = 0.01

    def __post_init__(self):
        if self.m_init < 1 or self.m_joint < 0 or self.z_ref < 1:
            raise ValueError("schedule: need m_init >= 1, m_joint >= 0, z_ref >= 1")
        if self.k_samples < 1:
            raise ValueError("k_samples must be >= 1")
        for f_ in fields(self):
            if f_.name.startswith("lr_") and getattr(self, f_.name) <= 0:
                raise ValueError(f"{f_.name} must be positive")

    def total_iterations(self) -> int:
        return self.m_init + self.m_joint


# Flat text-file keys; dotted names group related fields.
CONFIG_KEYS = {
    "m_init": "m_init",
    "m_joint": "m_joint",
    "z_ref": "z_ref",
    "k_samples": "k_samples",
    "r0": "r0",
    "lambda_r": "lambda_r",
    "lambda_dcp": "lambda_dcp",
    "lambda_tv": "lambda_tv",
    "dcp_patch": "dcp_patch",
    "seed": "seed",
    "grid.resolution": "grid_resolution",
    "grid.expansion": "grid_expansion",
    "init_points": "init_points",
    "random_point_frac": "random_point_frac",
    "lr.position": "lr_position",
    "lr.position_final": "lr_position_final",
    "lr.scale": "lr_scale",
    "lr.rotation": "lr_rotation",
    "lr.opacity": "lr_opacity",
    "lr.color": "lr_color",
    "lr.grid": "lr_grid",
    "lr.airlight": "lr_airlight",
    "stage1_scale_lr": "stage1_scale_lr",
    "densify.interval": "densify_interval",
    "densify.grad_threshold": "densify_grad_threshold",
    "densify.scale_split": "densify_scale_split",
    "densify.prune_opacity": "densify_prune_opacity",
    "densify.max": "densify_max",
    "densify.stage1": "densify_stage1",
    "csm.enabled": "csm_enabled",
    "plm.enabled": "plm_enabled",
    "ggs.enabled": "ggs_enabled",
    "ggs.drop": "ggs_drop",
    "checkpoint_interval": "checkpoint_interval",
    "near": "near",
}
_ATTR_TO_KEY = {v: k for k, v in CONFIG_KEYS.items()}


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f_ in fields(cfg):
        key = _ATTR_TO_KEY[f_.name]
        val = getattr(cfg, f_.name)
        if isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    for key, value in overrides.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key: {key}")
        attr = CONFIG_KEYS[key]
        setattr(cfg, attr, _coerce(value, getattr(cfg, attr)))
    cfg.__post_init__()
    return cfg


def config_from_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    overrides = {}
    for ln_no, ln in enumerate(text.splitlines(), start=1):
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        if "=" not in ln:
            raise ValueError(f"config line {ln_no}: expected 'key = value', got {ln!r}")
        key, value = ln.split("=", 1)
        overrides[key.strip()] = value.strip()
    return apply_overrides(cfg, overrides)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()


def stage_schedule(iteration: int, cfg: TrainConfig):
    """Stage tag plus active-feature flags for one iteration index."""
    if iteration >= cfg.total_iterations():
        raise ValueError(f"iteration {iteration} beyond schedule {cfg.total_iterations()}")
    stage = 1 if iteration < cfg.m_init else 2
    return stage, {
        "densify": cfg.densify_interval > 0 and (stage == 2 or cfg.densify_stage1),
        "ggs": stage == 2 and cfg.ggs_enabled,
        "residual": stage == 2 and cfg.plm_enabled,
        "scale_lr_override": stage == 1,
    }


# ---------------------------------------------------------------------------
# Views and model bundle
# ---------------------------------------------------------------------------

@dataclass
class View:
    view_id: int
    image: np.ndarray             # degraded input (H, W, 3)
    cam: Camera
    depth: np.ndarray | None = None  # true depth used only to seed the cloud


@dataclass
class TrainedModel:
    cloud: GaussianCloud
    grid: ExtinctionGrid | None
    net: AirlightNet | None
    layers: dict[int, ParticulateLayer]
    cfg: TrainConfig
    extent: float

    def render_clean(self, cam: Camera) -> np.ndarray:
        """Clean render: the Gaussian field with no medium and no residual."""
        return render_forward(self.cloud, cam).image


# ---------------------------------------------------------------------------
# Scene initialization
# ---------------------------------------------------------------------------

def seed_cloud_from_views(views: list[View], cfg: TrainConfig) -> GaussianCloud:
    """Back-project the views' depth maps into surface points, add a fraction
    of uniform-random points inside their bounding box, and wrap them into
    isotropic Gaussians sized by nearest-neighbor spacing."""
    rng = np.random.default_rng([cfg.seed, STREAM_INIT])
    pts, cols = [], []
    with_depth = [v for v in views if v.depth is not None]
    if with_depth:
        target_surface = max(int(round(cfg.init_points / (1.0 + cfg.random_point_frac))), 1)
        per_view = max(target_surface // len(with_depth), 1)
        for v in with_depth:
            dirs, z_to_t = v.cam.pixel_rays()
            depth = np.asarray(v.depth, dtype=np.float64).reshape(-1)
            good = np.flatnonzero(depth < v.cam.far * 0.999)
            if good.size == 0:
                continue
            stride = max(good.size // per_view, 1)
            sel = good[::stride][:per_view]
            t = depth[sel] * z_to_t[sel]
            pts.append(v.cam.position[None, :] + dirs[sel] * t[:, None])
            cols.append(v.image.reshape(-1, 3)[sel])
    if pts:
        pts = np.concatenate(pts, axis=0)
        cols = np.concatenate(cols, axis=0)
    else:
        pts = rng.uniform(-1.0, 1.0, size=(cfg.init_points, 3))
        cols = np.full((cfg.init_points, 3), 0.5)

    lo, hi = pts.min(axis=0), pts.max(axis=0)
    n_rand = int(round(pts.shape[0] * cfg.random_point_frac))
    if n_rand:
        extra = rng.uniform(lo, np.where(hi > lo, hi, lo + 1e-6), size=(n_rand, 3))
        pts = np.concatenate([pts, extra], axis=0)
        cols = np.concatenate([cols, np.full((n_rand, 3), 0.5)], axis=0)

    n = pts.shape[0]
    # Nearest-neighbor spacing sets the isotropic initial scale.
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    nn = np.sqrt(d2.min(axis=1))
    nn = np.clip(nn, 1e-4, None)
    scale = np.log(np.tile(nn[:, None], (1, 3)))
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    # Seeds start half-opaque: the first render must already explain most of
    # the observation, or the low-dimensional medium wins the early race to
    # absorb it within the short desk schedule.
    opac = np.full(n, inverse_sigmoid(0.5))
    return GaussianCloud(pts, scale, quat, opac, np.clip(cols, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class ViewBuffers:
    """Every per-view intermediate the pipeline produced for one forward pass."""

    i_hat: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    t_map: np.ndarray
    p_map: np.ndarray
    airlight: np.ndarray | None
    i_con: np.ndarray
    i_deg: np.ndarray
    render: object
    medium: object
    net_acts: object


def view_components(
    cloud: GaussianCloud,
    grid: ExtinctionGrid | None,
    net: AirlightNet | None,
    layers: dict[int, ParticulateLayer],
    k_samples: int,
    view: View,
) -> ViewBuffers:
    """Full per-view forward pass: clean render, medium, composition."""
    rr = render_forward(cloud, view.cam)
    h, w = view.cam.height, view.cam.width
    if grid is not None:
        mres = render_medium(grid, view.cam, rr.depth_map, k_samples)
        net_in = np.concatenate([view.image.reshape(-1, 3), mres.t_map.reshape(-1, 1)], axis=1)
        a_rgb, acts = net.forward(net_in, with_cache=True)
        p_map = (mres.mass.reshape(-1, 1) * a_rgb).reshape(h, w, 3)
        i_con = rr.image * mres.t_map[:, :, None] + p_map
        t_map = mres.t_map
    else:
        mres, a_rgb, acts = None, None, None
        p_map = np.zeros((h, w, 3))
        i_con = rr.image
        t_map = np.ones((h, w))
    layer = layers.get(view.view_id)
    i_deg = compose_degraded(i_con, layer) if layer is not None else i_con
    return ViewBuffers(
        rr.image, rr.alpha_map, rr.depth_map, t_map, p_map, a_rgb, i_con, i_deg, rr, mres, acts
    )


def model_view_components(model: TrainedModel, view: View) -> ViewBuffers:
    return view_components(
        model.cloud, model.grid, model.net, model.layers, model.cfg.k_samples, view
    )


class Trainer:
    def __init__(self, views: list[View], cfg: TrainConfig, out_dir=None):
        if len(views) < 2:
            raise ValueError("training needs at least 2 views")
        self.views = views
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.iteration = 0
        self.log_rows: list[tuple[int, int, LossReport]] = []
        self.summary = {
            "densify_events": 0,
            "densify_added": 0,
            "densify_pruned": 0,
            "densify_far": 0,
            "densify_near": 0,
        }

        self.cloud = seed_cloud_from_views(views, cfg)
        lo, hi = self.cloud.aabb()
        self.extent = float(np.linalg.norm(hi - lo) / 2.0) or 1.0
        if cfg.csm_enabled:
            self.grid = ExtinctionGrid.build(
                self.cloud, cfg.grid_resolution, cfg.grid_expansion, seed=cfg.seed
            )
            self.net = AirlightNet(seed=cfg.seed)
        else:
            self.grid = None
            self.net = None
        self.layers: dict[int, ParticulateLayer] = {}
        self.opt = Adam()
        self._reset_accumulators()

    # -- bookkeeping ---------------------------------------------------------

    def _reset_accumulators(self):
        n = len(self.cloud)
        self.grad_accum = np.zeros(n)
        self.grad_denom = np.zeros(n)
        self.dnorm_sum = np.zeros(n)
        self.dnorm_cnt = np.zeros(n)

    def _view_for(self, iteration: int) -> View:
        n = len(self.views)
        epoch, pos = divmod(iteration, n)
        order = np.random.default_rng([self.cfg.seed, STREAM_VIEW_ORDER, epoch]).permutation(n)
        return self.views[order[pos]]

    def _lrs(self, stage: int) -> dict[str, float]:
        cfg = self.cfg
        if stage == 1:
            lr_pos = cfg.lr_position * self.extent
            lr_scale = cfg.stage1_scale_lr
        else:
            progress = (self.iteration - cfg.m_init) / max(cfg.m_joint - 1, 1)
            progress = min(max(progress, 0.0), 1.0)
            lr_pos = self.extent * cfg.lr_position * (cfg.lr_position_final / cfg.lr_position) ** progress
            lr_scale = cfg.lr_scale
        lrs = {
            "position": lr_pos,
            "scale": lr_scale,
            "rotation": cfg.lr_rotation,
            "opacity": cfg.lr_opacity,
            "color": cfg.lr_color,
            "grid": cfg.lr_grid,
        }
        if self.net is not None:
            for name in self.net.params():
                lrs[f"net.{name}"] = cfg.lr_airlight
        return lrs

    # -- forward pieces --------------------------------------------------------

    def render_components(self, view: View) -> ViewBuffers:
        """Full per-view forward pass under the current model."""
        return view_components(
            self.cloud, self.grid, self.net, self.layers, self.cfg.k_samples, view
        )

    def _loss_and_grads(self, view: View, stage: int, flags: dict):
        buf = self.render_components(view)
        use_residual = flags["residual"] and view.view_id in self.layers
        if stage == 1:
            report, lg = stage1_loss(
                view.image, buf.i_con, buf.i_hat, self.grid, self._weights(), self.cfg.dcp_patch
            )
            d_con = lg["d_i_con"]
            d_hat_extra = lg["d_i_hat"]
        else:
            target = buf.i_deg if use_residual else buf.i_con
            report, lg = stage2_loss(view.image, target, self.grid, self._weights())
            d_con = lg["d_i_deg"]
            d_hat_extra = None
        d_grid = lg["d_grid_raw"]

        if self.grid is not None:
            t_col = buf.t_map[:, :, None]
            d_hat = d_con * t_col
            d_t = np.sum(d_con * buf.i_hat, axis=2).reshape(-1)
            d_p = d_con.reshape(-1, 3)
            mass = buf.medium.mass.reshape(-1)
            d_mass = np.sum(d_p * buf.airlight, axis=1)
            d_a = d_p * mass[:, None]
            net_grads, d_net_in = self.net.backward(buf.net_acts, d_a)
            d_t = d_t + d_net_in[:, 3]
            d_raw = render_medium_backward(self.grid, buf.medium, d_t, d_mass)
            d_grid = d_raw if d_grid is None else d_grid + d_raw
        else:
            d_hat = d_con
            net_grads = None
        if d_hat_extra is not None:
            d_hat = d_hat + d_hat_extra

        g_grads, screen = render_backward(buf.render, d_hat)
        return report, buf, g_grads, screen, d_grid, net_grads

    def _weights(self) -> LossWeights:
        return LossWeights(self.cfg.lambda_r, self.cfg.lambda_dcp, self.cfg.lambda_tv)

    # -- stage boundary / refresh ----------------------------------------------

    def _make_layers(self):
        for v in self.views:
            buf = self.render_components(v)
            self.layers[v.view_id] = extract_residual(v.image, buf.i_con, v.view_id, self.iteration)

    def _refresh_layers(self):
        for v in self.views:
            buf_i_con = self.render_components(v).i_con
            self.layers[v.view_id] = extract_residual(v.image, buf_i_con, v.view_id, self.iteration)

    # -- one iteration -----------------------------------------------------------

    def step(self) -> LossReport:
        cfg = self.cfg
        it = self.iteration
        stage, flags = stage_schedule(it, cfg)
        if stage == 2 and cfg.plm_enabled and not self.layers:
            self._make_layers()

        view = self._view_for(it)
        report, buf, g_grads, screen, d_grid, net_grads = self._loss_and_grads(view, stage, flags)
        if not np.isfinite(report.total):
            self._abort_dump(view, buf)
            raise NumericalAbort(f"non-finite loss at iteration {it} on view {view.view_id}")

        if flags["ggs"]:
            emap = ggs_mod.error_map_from(buf.i_deg, view.image)
            state = ggs_mod.compute_factors(buf.render.frags, emap, cfg.r0, cfg.ggs_drop)
            ggs_mod.rescale_gradients(g_grads, screen, state.factor)

        if flags["densify"]:
            frags = buf.render.frags
            norms = np.linalg.norm(screen, axis=1)
            self.grad_accum[frags.idx] += norms[frags.idx]
            self.grad_denom[frags.idx] += 1.0
            dn = ggs_mod.normalize_depth(frags.depth)
            self.dnorm_sum[frags.idx] += dn
            self.dnorm_cnt[frags.idx] += 1.0

        grads = dict(g_grads)
        if d_grid is not None:
            grads["grid"] = d_grid
        if net_grads is not None:
            for name, g in net_grads.items():
                grads[f"net.{name}"] = g

        params = self.cloud.params()
        if self.grid is not None:
            params["grid"] = self.grid.raw
            for name, p in self.net.params().items():
                params[f"net.{name}"] = p
        self.opt.step(params, grads, self._lrs(stage))
        self.cloud.set_params({k: params[k] for k in PARAM_GROUPS})
        self.cloud.normalize_rotations()
        np.clip(self.cloud.color, 0.0, 1.0, out=self.cloud.color)
        if self.grid is not None:
            self.grid.raw = params["grid"]
            self.net.set_params({n: params[f"net.{n}"] for n in self.net.params()})

        densify_base = 0 if cfg.densify_stage1 else cfg.m_init
        if flags["densify"] and it >= densify_base and (it - densify_base + 1) % cfg.densify_interval == 0:
            self._densify(it)

        self.log_rows.append((it, stage, report))
        self.iteration = it + 1

        if stage == 2 and cfg.plm_enabled:
            j = self.iteration - cfg.m_init
            if j % cfg.z_ref == 0:
                self._refresh_layers()

        if (
            self.out_dir is not None
            and cfg.checkpoint_interval > 0
            and self.iteration % cfg.checkpoint_interval == 0
        ):
            self.save_checkpoint(self.out_dir / f"checkpoint_{self.iteration:06d}.nimc")
        return report

    def _densify(self, it: int):
        cfg = self.cfg
        dconf = DensifyConfig(
            grad_threshold=cfg.densify_grad_threshold,
            scale_split_threshold=cfg.densify_scale_split * self.extent,
            opacity_prune_threshold=cfg.densify_prune_opacity,
            interval=cfg.densify_interval,
            max_gaussians=cfg.densify_max,
        )
        rng = np.random.default_rng([cfg.seed, STREAM_DENSIFY, it])
        out = densify_and_prune(self.cloud, self.grad_accum, self.grad_denom, dconf, rng)
        if out.triggered.size:
            mean_dn = self.dnorm_sum / np.maximum(self.dnorm_cnt, 1.0)
            far = mean_dn[out.triggered] > 0.5
            self.summary["densify_far"] += int(far.sum())
            self.summary["densify_near"] += int((~far).sum())
        self.summary["densify_events"] += 1
        self.summary["densify_added"] += out.n_cloned + 2 * out.n_split
        self.summary["densify_pruned"] += out.n_pruned + out.n_split
        self.cloud = out.cloud
        self.opt.resize(PARAM_GROUPS, out.src_index, out.fresh_mask)
        self._reset_accumulators()

    def _abort_dump(self, view: View, buf: ViewBuffers):
        if self.out_dir is None:
            return
        dump_dir = self.out_dir / f"abort_view_{view.view_id}"
        dump_dir.mkdir(parents=True, exist_ok=True)
        write_raw(dump_dir / "i_hat.nimf", buf.i_hat)
        write_raw(dump_dir / "t.nimf", buf.t_map[:, :, None])
        write_raw(dump_dir / "p.nimf", buf.p_map)
        write_raw(dump_dir / "i_con.nimf", buf.i_con)
        write_raw(dump_dir / "i_deg.nimf", buf.i_deg)

    def run(self, log_path=None) -> TrainedModel:
        total = self.cfg.total_iterations()
        while self.iteration < total:
            report = self.step()
            if log_path is not None:
                it = self.iteration - 1
                append_log(log_path, it, 1 if it < self.cfg.m_init else 2, report)
        if self.cfg.plm_enabled and self.cfg.m_joint == 0 and not self.layers:
            self._make_layers()
        return self.model()

    def model(self) -> TrainedModel:
        return TrainedModel(self.cloud, self.grid, self.net, dict(self.layers), self.cfg, self.extent)

    # -- checkpoints ---------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        blocks: list[tuple[str, bytes]] = [("scene", self.cloud.to_bytes())]
        if self.grid is not None:
            blocks.append(("grid", self.grid.to_bytes()))
            blocks.append(("net", self.net.to_bytes()))
        for vid in sorted(self.layers):
            layer = self.layers[vid]
            blocks.append((f"layer_{vid}", raw_bytes(layer.residual)))
            if layer.residual_lo is not None:
                blocks.append((f"layerlo_{vid}", raw_bytes(layer.residual_lo)))
        blocks.append(("optim", self.opt.to_bytes()))
        acc = np.stack([self.grad_accum, self.grad_denom, self.dnorm_sum, self.dnorm_cnt])
        blocks.append(
            ("accum", struct.pack("<Q", acc.shape[1]) + np.ascontiguousarray(acc, dtype="<f8").tobytes())
        )
        meta = (
            f"iteration = {self.iteration}\n"
            f"extent = {self.extent!r}\n"
            f"config_hash = {config_hash(self.cfg)}\n"
        )
        blocks.append(("meta", meta.encode()))
        blocks.append(("config", config_to_text(self.cfg).encode()))

        toc = struct.pack("<I", len(blocks))
        payload = b""
        offset = 0
        entries = b""
        for name, data in blocks:
            nb = name.encode()
            entries += struct.pack("<H", len(nb)) + nb + struct.pack("<QQ", offset, len(data))
            payload += data
            offset += len(data)
        Path(path).write_bytes(CHECKPOINT_MAGIC + toc + entries + payload)

    @staticmethod
    def read_checkpoint(path) -> dict[str, bytes]:
        raw = Path(path).read_bytes()
        if raw[:4] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a training checkpoint (magic {raw[:4]!r})")
        (count,) = struct.unpack("<I", raw[4:8])
        off = 8
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", raw[off : off + 2])
            off += 2
            name = raw[off : off + nlen].decode()
            off += nlen
            start, size = struct.unpack("<QQ", raw[off : off + 16])
            off += 16
            entries.append((name, start, size))
        base = off
        return {name: raw[base + start : base + start + size] for name, start, size in entries}

    @classmethod
    def resume(cls, views: list[View], path) -> "Trainer":
        blocks = cls.read_checkpoint(path)
        cfg = config_from_text(blocks["config"].decode())
        tr = cls(views, cfg)
        tr.load_state(blocks)
        return tr

    def load_state(self, blocks: dict[str, bytes]) -> None:
        self.cloud = GaussianCloud.from_bytes(blocks["scene"])
        if "grid" in blocks:
            self.grid = ExtinctionGrid.from_bytes(blocks["grid"])
            self.net = AirlightNet.from_bytes(blocks["net"])
        self.opt = Adam.from_bytes(blocks["optim"])
        self.layers = _layers_from_blocks(blocks)
        meta = dict(
            ln.split(" = ", 1) for ln in blocks["meta"].decode().strip().splitlines()
        )
        self.iteration = int(meta["iteration"])
        self.extent = float(meta["extent"])
        self._reset_accumulators()
        if "accum" in blocks:
            raw = blocks["accum"]
            (n,) = struct.unpack("<Q", raw[:8])
            acc = np.frombuffer(raw[8:], dtype="<f8").reshape(4, n)
            self.grad_accum, self.grad_denom = acc[0].copy(), acc[1].copy()
            self.dnorm_sum, self.dnorm_cnt = acc[2].copy(), acc[3].copy()


def _layers_from_blocks(blocks: dict[str, bytes]) -> dict[int, ParticulateLayer]:
    layers = {}
    for name, data in blocks.items():
        if name.startswith("layer_"):
            vid = int(name.split("_", 1)[1])
            lo_blk = blocks.get(f"layerlo_{vid}")
            lo = raw_from_bytes(lo_blk) if lo_blk is not None else None
            layers[vid] = ParticulateLayer(vid, raw_from_bytes(data), residual_lo=lo)
    return layers


def model_from_checkpoint(path, views: list[View] | None = None) -> TrainedModel:
    """Load the model bundle out of a checkpoint without a trainer."""
    blocks = Trainer.read_checkpoint(path)
    cfg = config_from_text(blocks["config"].decode())
    cloud = GaussianCloud.from_bytes(blocks["scene"])
    grid = ExtinctionGrid.from_bytes(blocks["grid"]) if "grid" in blocks else None
    net = AirlightNet.from_bytes(blocks["net"]) if "net" in blocks else None
    layers = _layers_from_blocks(blocks)
    meta = dict(ln.split(" = ", 1) for ln in blocks["meta"].decode().strip().splitlines())
    return TrainedModel(cloud, grid, net, layers, cfg, float(meta["extent"]))


def train(views: list[View], cfg: TrainConfig, out_dir=None, log_path=None):
    """Run the full two-stage schedule; returns (model, trainer)."""
    tr = Trainer(views, cfg, out_dir)
    model = tr.run(log_path=log_path)
    return model, tr
