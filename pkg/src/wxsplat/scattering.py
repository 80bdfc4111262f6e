"""Volumetric medium: voxel extinction field, ray-marched transmittance,
single-scattering airlight, and the airlight color predictor.

The medium is a node-centered voxel grid of raw scalars; extinction is
``beta(x) = softplus(trilinear(raw, x))`` inside the grid's bounding box and
exactly zero outside. Per camera ray, K midpoint samples over ``[t_n, t_0]``
give the discrete transmittance

    T = exp(-sum_j beta(r(s_j)) ds_j)

and the airlight mass ``sum_i T_i (1 - exp(-beta_i ds_i))`` which multiplies
the predicted airlight color. The telescoping structure makes
``T + sum_i T_i (1 - exp(-beta_i ds_i)) = 1`` hold to machine precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gaussians import Camera, GaussianCloud
from .validation import check_same_shape

GRID_MAGIC = b"NIMB"
NET_MAGIC = b"NIMA"

DEFAULT_RESOLUTION = 32
DEFAULT_EXPANSION = 2.0
GRID_INIT_STD = 0.01

# Offset inside the softplus so the near-zero raw initialization maps to a
# near-clear medium (beta ~ 0.05) instead of softplus(0) ~ 0.69, which would
# start training inside an opaque fog that starves the Gaussians of
# gradient.
BETA_RAW_SHIFT = -3.0


def softplus(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# Extinction grid
# ---------------------------------------------------------------------------

@dataclass
class GridQueryCache:
    shape: tuple[int, int, int]
    inside: np.ndarray      # (P,) bool
    i0: np.ndarray          # (Q, 3) lower corner per inside point
    frac: np.ndarray        # (Q, 3)
    gate: np.ndarray        # (Q,) d(softplus)/dy at the interpolated value


class ExtinctionGrid:
    """Axis-aligned voxel grid of pre-softplus extinction values."""

    def __init__(self, aabb_min, aabb_max, raw: np.ndarray):
        self.aabb_min = np.asarray(aabb_min, dtype=np.float64).reshape(3)
        self.aabb_max = np.asarray(aabb_max, dtype=np.float64).reshape(3)
        if not np.all(self.aabb_min < self.aabb_max):
            raise ValueError("extinction grid: aabb min must be strictly below max")
        self.raw = np.asarray(raw, dtype=np.float64)
        if self.raw.ndim != 3 or min(self.raw.shape) < 2:
            raise ValueError("extinction grid: resolution must be at least 2 per axis")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.raw.shape

    @classmethod
    def build(
        cls,
        cloud: GaussianCloud,
        resolution=DEFAULT_RESOLUTION,
        expansion: float = DEFAULT_EXPANSION,
        seed: int = 0,
    ) -> "ExtinctionGrid":
        """Fit an expanded bounding box around the Gaussian centers and draw
        the raw field from a seeded Gaussian(0, 0.01)."""
        if len(cloud) == 0:
            raise ValueError("extinction grid: empty scene")
        lo, hi = cloud.aabb()
        degenerate = hi - lo <= 0
        lo = np.where(degenerate, lo - 0.5, lo)
        hi = np.where(degenerate, hi + 0.5, hi)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo) * expansion
        if np.isscalar(resolution):
            resolution = (int(resolution),) * 3
        rng = np.random.default_rng(seed)
        raw = rng.normal(0.0, GRID_INIT_STD, size=tuple(int(r) for r in resolution))
        return cls(center - half, center + half, raw)

    def beta_nodes(self) -> np.ndarray:
        """Extinction evaluated at the grid nodes."""
        return softplus(self.raw + BETA_RAW_SHIFT)

    def query(self, points: np.ndarray, with_cache: bool = False):
        """Extinction at world points (..., 3); zero outside the box."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        nx, ny, nz = self.raw.shape
        inside = np.all((pts >= self.aabb_min) & (pts <= self.aabb_max), axis=1)
        beta = np.zeros(pts.shape[0])
        q = np.flatnonzero(inside)
        if q.size:
            extent = self.aabb_max - self.aabb_min
            g = (pts[q] - self.aabb_min) / extent * (np.array([nx, ny, nz]) - 1.0)
            i0 = np.minimum(np.floor(g).astype(np.int64), np.array([nx, ny, nz]) - 2)
            i0 = np.maximum(i0, 0)
            frac = g - i0
            y = self._gather(i0, frac) + BETA_RAW_SHIFT
            beta[q] = softplus(y)
            gate = 1.0 / (1.0 + np.exp(-y))
        else:
            i0 = np.zeros((0, 3), dtype=np.int64)
            frac = np.zeros((0, 3))
            gate = np.zeros(0)
        beta = beta.reshape(np.asarray(points).shape[:-1])
        if with_cache:
            return beta, GridQueryCache((nx, ny, nz), inside, i0, frac, gate)
        return beta

    def _gather(self, i0: np.ndarray, frac: np.ndarray) -> np.ndarray:
        raw = self.raw
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        out = np.zeros(i0.shape[0])
        for dx_, wx in ((0, 1.0 - fx), (1, fx)):
            for dy_, wy in ((0, 1.0 - fy), (1, fy)):
                for dz_, wz in ((0, 1.0 - fz), (1, fz)):
                    out += wx * wy * wz * raw[x0 + dx_, y0 + dy_, z0 + dz_]
        return out

    def query_backward(self, cache: GridQueryCache, d_beta: np.ndarray) -> np.ndarray:
        """Scatter adjoints of the queried extinction back to the raw field."""
        nx, ny, nz = cache.shape
        d_raw_flat = np.zeros(nx * ny * nz)
        db = np.asarray(d_beta, dtype=np.float64).reshape(-1)[cache.inside]
        dy = db * cache.gate
        x0, y0, z0 = cache.i0[:, 0], cache.i0[:, 1], cache.i0[:, 2]
        fx, fy, fz = cache.frac[:, 0], cache.frac[:, 1], cache.frac[:, 2]
        for dx_, wx in ((0, 1.0 - fx), (1, fx)):
            for dy_, wy in ((0, 1.0 - fy), (1, fy)):
                for dz_, wz in ((0, 1.0 - fz), (1, fz)):
                    flat = ((x0 + dx_) * ny + (y0 + dy_)) * nz + (z0 + dz_)
                    d_raw_flat += np.bincount(flat, weights=dy * wx * wy * wz, minlength=nx * ny * nz)
        return d_raw_flat.reshape(nx, ny, nz)

    # -- checkpoint format ---------------------------------------------------

    def to_bytes(self) -> bytes:
        nx, ny, nz = self.raw.shape
        head = GRID_MAGIC + np.array([*self.aabb_min, *self.aabb_max], dtype="<f8").tobytes()
        head += struct.pack("<III", nx, ny, nz)
        return head + np.ascontiguousarray(self.raw, dtype="<f8").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, origin: str = "<bytes>") -> "ExtinctionGrid":
        if raw[:4] != GRID_MAGIC:
            raise ValueError(f"{origin}: not an extinction grid (magic {raw[:4]!r})")
        box = np.frombuffer(raw[4:52], dtype="<f8")
        nx, ny, nz = struct.unpack("<III", raw[52:64])
        data = np.frombuffer(raw[64 : 64 + nx * ny * nz * 8], dtype="<f8").reshape(nx, ny, nz).copy()
        return cls(box[:3], box[3:], data)

    @classmethod
    def load(cls, path) -> "ExtinctionGrid":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def tv_loss(grid: ExtinctionGrid, with_grad: bool = False):
    """Mean absolute forward difference of the node extinction (L1 TV).

    Returns the scalar, or ``(scalar, d_raw)`` with the gradient routed
    through the softplus activation.
    """
    beta = grid.beta_nodes()
    diffs = [np.diff(beta, axis=ax) for ax in range(3)]
    count = sum(d.size for d in diffs)
    value = sum(float(np.abs(d).sum()) for d in diffs) / count
    if not with_grad:
        return value
    d_beta = np.zeros_like(beta)
    for ax, d in enumerate(diffs):
        s = np.sign(d) / count
        hi = [slice(None)] * 3
        lo = [slice(None)] * 3
        hi[ax] = slice(1, None)
        lo[ax] = slice(None, -1)
        d_beta[tuple(hi)] += s
        d_beta[tuple(lo)] -= s
    d_raw = d_beta / (1.0 + np.exp(-(grid.raw + BETA_RAW_SHIFT)))
    return value, d_raw


# ---------------------------------------------------------------------------
# Ray sampling
# ---------------------------------------------------------------------------

@dataclass
class RayBundle:
    """Midpoint sample positions for a batch of rays through the grid."""

    origin: np.ndarray      # (3,) shared camera origin
    dirs: np.ndarray        # (P, 3) unit directions
    t_near: np.ndarray      # (P,)
    t_far: np.ndarray       # (P,)
    ds: np.ndarray          # (P,) uniform step per ray
    s: np.ndarray           # (P, K) sample distances
    valid: np.ndarray       # (P,) False where the ray misses the grid or the
                            # interval is empty; such rays carry T=1, P=0

    @property
    def k(self) -> int:
        return self.s.shape[1]

    def points(self) -> np.ndarray:
        return self.origin[None, None, :] + self.s[:, :, None] * self.dirs[:, None, :]


def _box_entry_exit(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo[None, :] - origin[None, :]) * inv
        t2 = (hi[None, :] - origin[None, :]) * inv
    # Degenerate axes (dir component 0): inside -> (-inf, inf), outside -> miss.
    par = dirs == 0.0
    between = (origin[None, :] >= lo[None, :]) & (origin[None, :] <= hi[None, :])
    t_lo = np.where(par, np.where(between, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(par, np.where(between, np.inf, -np.inf), np.maximum(t1, t2))
    return t_lo.max(axis=1), t_hi.min(axis=1)


def make_ray_bundle(
    grid: ExtinctionGrid, cam: Camera, depth_z: np.ndarray, k: int
) -> RayBundle:
    """One ray per pixel, bounded by the camera near plane (clipped to the
    grid entry) and the rendered surface depth.

    ``depth_z`` is the camera-space z depth map; it is converted to distance
    along each unit ray and treated as a constant (no gradient flows through
    the bound).
    """
    if k < 1:
        raise ValueError("ray sampling needs k >= 1")
    dirs, z_to_t = cam.pixel_rays()
    t0 = np.asarray(depth_z, dtype=np.float64).reshape(-1) * z_to_t
    t_enter, t_exit = _box_entry_exit(cam.position, dirs, grid.aabb_min, grid.aabb_max)
    t_n = np.maximum(cam.near, t_enter)
    valid = (t_exit > t_n) & (t0 > t_n)
    t_n = np.where(valid, t_n, 0.0)
    t_far = np.where(valid, t0, 0.0)
    ds = (t_far - t_n) / k
    j = np.arange(1, k + 1)
    s = t_n[:, None] + (j[None, :] - 0.5) * ds[:, None]
    return RayBundle(cam.position.copy(), dirs, t_n, t_far, ds, s, valid)


def sample_ray(grid: ExtinctionGrid, cam: Camera, u: float, v: float, t0_z: float, k: int) -> RayBundle:
    """Single-ray variant of :func:`make_ray_bundle` for pixel center (u, v)."""
    d_cam = np.array([(u - cam.cx) / cam.focal, (v - cam.cy) / cam.focal, 1.0])
    norm = np.linalg.norm(d_cam)
    dirs = (d_cam / norm) @ cam.rotation
    t0 = float(t0_z) * norm
    t_enter, t_exit = _box_entry_exit(cam.position, dirs[None, :], grid.aabb_min, grid.aabb_max)
    t_n = max(cam.near, float(t_enter[0]))
    valid = (float(t_exit[0]) > t_n) and (t0 > t_n)
    if not valid:
        t_n, t0 = 0.0, 0.0
    ds = np.array([(t0 - t_n) / k])
    j = np.arange(1, k + 1)
    s = (t_n + (j - 0.5) * ds[0])[None, :]
    return RayBundle(cam.position.copy(), dirs[None, :], np.array([t_n]), np.array([t0]), ds, s, np.array([valid]))


# ---------------------------------------------------------------------------
# Transmittance and airlight
# ---------------------------------------------------------------------------

def transmittance_from_beta(beta: np.ndarray, ds: np.ndarray):
    """Per-ray transmittance and the cumulative per-sample sequence.

    ``beta`` is (P, K), ``ds`` (P,). Returns ``(T, T_i)`` with
    ``T_i = exp(-sum_{j<i} beta_j ds_j)`` (so ``T_1 = 1``) and
    ``T = exp(-sum_j beta_j ds_j)``.
    """
    tau = beta * ds[:, None]
    csum = np.cumsum(tau, axis=1)
    t_i = np.exp(-(csum - tau))
    t = np.exp(-csum[:, -1])
    return t, t_i


def airlight_mass(beta: np.ndarray, ds: np.ndarray, t_i: np.ndarray) -> np.ndarray:
    """Scattering mass ``sum_i T_i (1 - exp(-beta_i ds_i))`` per ray."""
    tau = beta * ds[:, None]
    return np.sum(t_i * (-np.expm1(-tau)), axis=1)


def medium_backward(
    beta: np.ndarray,
    ds: np.ndarray,
    t: np.ndarray,
    t_i: np.ndarray,
    d_t: np.ndarray,
    d_mass: np.ndarray,
) -> np.ndarray:
    """Adjoint of (transmittance, airlight mass) w.r.t. the sampled beta."""
    tau = beta * ds[:, None]
    e = np.exp(-tau)
    term = t_i * (-np.expm1(-tau))
    rev = np.cumsum(term[:, ::-1], axis=1)[:, ::-1]
    suffix = rev - term  # sum over samples strictly after each index
    d_tau = d_mass[:, None] * (t_i * e - suffix) - (t * d_t)[:, None]
    return d_tau * ds[:, None]


def airlight_term(mass: np.ndarray, a_rgb: np.ndarray) -> np.ndarray:
    """Airlight contribution P = mass * A, per ray, per channel."""
    return mass[:, None] * a_rgb


def compose_continuous(i_hat: np.ndarray, t_map: np.ndarray, p_map: np.ndarray) -> np.ndarray:
    """Continuous-medium degradation ``I_con = I_hat * T + P`` per pixel.

    Values are left unclamped so gradients flow freely; clamping happens
    only when images are written out.
    """
    i_hat = np.asarray(i_hat, dtype=np.float64)
    t_map = np.asarray(t_map, dtype=np.float64)
    p_map = np.asarray(p_map, dtype=np.float64)
    if t_map.ndim == i_hat.ndim - 1:
        t_map = t_map[..., None]
    check_same_shape(i_hat, p_map, "compose_continuous")
    if t_map.shape[:2] != i_hat.shape[:2]:
        raise ValueError(f"compose_continuous: T map {t_map.shape} vs image {i_hat.shape}")
    return i_hat * t_map + p_map


# ---------------------------------------------------------------------------
# Airlight network
# ---------------------------------------------------------------------------

class AirlightNet:
    """Small MLP mapping (degraded RGB, transmittance) to an airlight color.

    Two tanh hidden layers of width 32 and a sigmoid head. The final layer
    starts at zero so the initial prediction is neutral gray.
    """

    DIMS = (4, 32, 32, 3)

    def __init__(self, weights=None, biases=None, seed: int = 0):
        if weights is None:
            rng = np.random.default_rng(seed)
            self.weights, self.biases = [], []
            for li, (n_in, n_out) in enumerate(zip(self.DIMS[:-1], self.DIMS[1:])):
                if li == len(self.DIMS) - 2:
                    w = np.zeros((n_in, n_out))
                else:
                    w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
                self.weights.append(w)
                self.biases.append(np.zeros(n_out))
        else:
            self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
            self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            self.weights[i] = p[f"w{i}"]
            self.biases[i] = p[f"b{i}"]

    def forward(self, x: np.ndarray, with_cache: bool = False):
        """Map (P, 4) inputs to (P, 3) airlight colors in (0, 1)."""
        x = np.asarray(x, dtype=np.float64)
        acts = [x]
        h = x
        n_layers = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = 1.0 / (1.0 + np.exp(-z)) if i == n_layers - 1 else np.tanh(z)
            acts.append(h)
        if with_cache:
            return h, acts
        return h

    def backward(self, acts: list[np.ndarray], d_out: np.ndarray):
        """Adjoint of :meth:`forward`: returns (param grads dict, d_input)."""
        n_layers = len(self.weights)
        grads: dict[str, np.ndarray] = {}
        d_h = np.asarray(d_out, dtype=np.float64)
        for i in range(n_layers - 1, -1, -1):
            h_out = acts[i + 1]
            if i == n_layers - 1:
                d_z = d_h * h_out * (1.0 - h_out)
            else:
                d_z = d_h * (1.0 - h_out**2)
            grads[f"w{i}"] = acts[i].T @ d_z
            grads[f"b{i}"] = d_z.sum(axis=0)
            d_h = d_z @ self.weights[i].T
        return grads, d_h

    # -- checkpoint format ---------------------------------------------------

    def to_bytes(self) -> bytes:
        out = NET_MAGIC + struct.pack("<I", len(self.weights))
        for w, b in zip(self.weights, self.biases):
            out += struct.pack("<II", w.shape[0], w.shape[1])
            out += np.ascontiguousarray(w, dtype="<f8").tobytes()
            out += np.ascontiguousarray(b, dtype="<f8").tobytes()
        return out

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, origin: str = "<bytes>") -> "AirlightNet":
        if raw[:4] != NET_MAGIC:
            raise ValueError(f"{origin}: not an airlight checkpoint (magic {raw[:4]!r})")
        (n_layers,) = struct.unpack("<I", raw[4:8])
        off = 8
        weights, biases = [], []
        for _ in range(n_layers):
            n_in, n_out = struct.unpack("<II", raw[off : off + 8])
            off += 8
            w = np.frombuffer(raw[off : off + n_in * n_out * 8], dtype="<f8").reshape(n_in, n_out).copy()
            off += n_in * n_out * 8
            b = np.frombuffer(raw[off : off + n_out * 8], dtype="<f8").copy()
            off += n_out * 8
            weights.append(w)
            biases.append(b)
        return cls(weights, biases)

    @classmethod
    def load(cls, path) -> "AirlightNet":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Full per-view medium pass
# ---------------------------------------------------------------------------

@dataclass
class MediumResult:
    t_map: np.ndarray       # (H, W)
    mass: np.ndarray        # (H, W) scattering mass (airlight weight)
    bundle: RayBundle
    beta: np.ndarray        # (P, K)
    t_i: np.ndarray         # (P, K)
    t_flat: np.ndarray      # (P,)
    cache: GridQueryCache


def render_medium(grid: ExtinctionGrid, cam: Camera, depth_z: np.ndarray, k: int) -> MediumResult:
    """Transmittance and scattering mass for every pixel of a view."""
    bundle = make_ray_bundle(grid, cam, depth_z, k)
    pts = bundle.points()
    beta, cache = grid.query(pts, with_cache=True)
    beta = beta.reshape(bundle.s.shape)
    t, t_i = transmittance_from_beta(beta, bundle.ds)
    mass = airlight_mass(beta, bundle.ds, t_i)
    t = np.where(bundle.valid, t, 1.0)
    mass = np.where(bundle.valid, mass, 0.0)
    h, w = cam.height, cam.width
    return MediumResult(t.reshape(h, w), mass.reshape(h, w), bundle, beta, t_i, t, cache)


def render_medium_backward(
    grid: ExtinctionGrid, mres: MediumResult, d_t_map: np.ndarray, d_mass: np.ndarray
) -> np.ndarray:
    """Adjoint of :func:`render_medium` w.r.t. the grid's raw values."""
    d_t = np.asarray(d_t_map, dtype=np.float64).reshape(-1) * mres.bundle.valid
    d_m = np.asarray(d_mass, dtype=np.float64).reshape(-1) * mres.bundle.valid
    d_beta = medium_backward(mres.beta, mres.bundle.ds, mres.t_flat, mres.t_i, d_t, d_m)
    return grid.query_backward(mres.cache, d_beta)
