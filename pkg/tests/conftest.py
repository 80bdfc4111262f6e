"""Shared fixtures and independent oracles.

The oracles here deliberately re-derive results with the dumbest possible
code (per-pixel loops, dense quadrature, double loops) so the production
paths are checked against something that cannot share their bugs.
"""

from __future__ import annotations

import numpy as np
import pytest

from wxsplat.gaussians import Camera, GaussianCloud, inverse_sigmoid, project

T_STOP = 1e-4


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def central_diff(fn, arr: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central finite differences of scalar ``fn`` w.r.t. entries of ``arr``.

    Mutates ``arr`` in place and restores it. ``indices`` restricts the
    check to a subset of flat indices.
    """
    flat = arr.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        hi = fn()
        flat[i] = old - step
        lo = fn()
        flat[i] = old
        grad[i] = (hi - lo) / (2.0 * step)
    return grad.reshape(arr.shape)


def assert_grad_close(analytic: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, what: str = "grad"):
    a = np.asarray(analytic).reshape(-1)
    n = np.asarray(numeric).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    err = np.abs(a - n) / denom
    worst = float(err.max()) if err.size else 0.0
    assert worst <= rel, f"{what}: worst relative error {worst:.3e} at {int(err.argmax())}"


# ---------------------------------------------------------------------------
# Naive per-pixel blending oracle
# ---------------------------------------------------------------------------

def oracle_render(cloud: GaussianCloud, cam: Camera):
    """Tile-free sequential blender: per pixel, walk the depth-sorted
    fragments and composite one at a time with scalar arithmetic."""
    frag = project(cloud, cam)
    h, w = cam.height, cam.width
    image = np.zeros((h, w, 3))
    alpha_map = np.zeros((h, w))
    wdepth = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            t = np.float64(1.0)
            px = np.float64(j + 0.5)
            py = np.float64(i + 0.5)
            for m in range(len(frag)):
                x0, x1, y0, y1 = frag.bbox[m]
                if not (x0 <= j < x1 and y0 <= i < y1):
                    continue
                if t < T_STOP:
                    break
                dx = px - frag.center[m, 0]
                dy = py - frag.center[m, 1]
                ca, cb, cc = frag.conic[m]
                # Same association order as the production kernel; the oracle's
                # independence is the per-pixel sequential compositing.
                power = (-0.5 * ca * (dx * dx)) - (cb * dy * dx) - (0.5 * cc * (dy * dy))
                alpha = min(frag.opac[m] * np.exp(power), 0.99)
                wgt = t * alpha
                image[i, j] += wgt * frag.color[m]
                wdepth[i, j] += wgt * frag.depth[m]
                t = t * (1.0 - alpha)
            alpha_map[i, j] = 1.0 - t
    covered = alpha_map >= 1e-3
    depth = np.where(covered, wdepth / np.where(covered, alpha_map, 1.0), cam.far)
    return image, alpha_map, depth


# ---------------------------------------------------------------------------
# Scene factories
# ---------------------------------------------------------------------------

def make_camera(width=16, height=16, focal=None, pos=(0.0, 0.0, -4.0)) -> Camera:
    focal = focal if focal is not None else width * 1.0
    return Camera(
        np.asarray(pos, dtype=float),
        np.eye(3),
        focal,
        width / 2.0,
        height / 2.0,
        width,
        height,
        far=50.0,
    )


def make_cloud(n=8, seed=0, spread=0.8, z_range=(2.5, 5.0), opacity=(0.3, 0.8)) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    pos = np.zeros((n, 3))
    pos[:, 0] = rng.uniform(-spread, spread, n)
    pos[:, 1] = rng.uniform(-spread, spread, n)
    pos[:, 2] = rng.uniform(*z_range, n) - 4.0
    scale = np.log(rng.uniform(0.08, 0.3, (n, 3)))
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    opac = inverse_sigmoid(rng.uniform(*opacity, n))
    color = rng.uniform(0.1, 0.9, (n, 3))
    return GaussianCloud(pos, scale, quat, opac, color)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
