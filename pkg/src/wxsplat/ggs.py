"""Geometry-guided gradient scaling.

Per visible Gaussian, a multiplicative factor built from three cues:
normalized depth, projected radius against a reference radius, and a
sigmoid gate over the robustly normalized reconstruction error sampled at
the projected center. Factors are mean-normalized to 1 over the visible set
so the global gradient magnitude is preserved while relative update
strength shifts toward distant, oversized, or poorly fit Gaussians. The
factors themselves are constants during differentiation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .gaussians import PARAM_GROUPS, Fragments, sigmoid
from .imaging import bilinear_sample

MAD_FLOOR = 1e-8
MEAN_FLOOR = 1e-12

FACTOR_NAMES = ("depth", "radius", "error")


@dataclass
class GgsState:
    """Per-Gaussian scaling diagnostics for one view."""

    idx: np.ndarray        # (M,) visible Gaussian indices
    d_norm: np.ndarray
    radius: np.ndarray
    err: np.ndarray
    err_norm: np.ndarray
    weight: np.ndarray
    factor: np.ndarray     # (N,) full-scene factors; culled Gaussians carry 1


def normalize_depth(depths: np.ndarray) -> np.ndarray:
    """Min-max depth normalization over the visible set; 0.5 when degenerate."""
    depths = np.asarray(depths, dtype=np.float64)
    if depths.size == 0:
        return depths.copy()
    lo, hi = depths.min(), depths.max()
    if hi == lo:
        return np.full_like(depths, 0.5)
    return (depths - lo) / (hi - lo)


def sample_errors(error_map: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Bilinearly sample the channel-summed error map at projected centers."""
    vals = bilinear_sample(error_map, centers[:, 0], centers[:, 1])
    return vals[:, 0]


def robust_normalize(errors: np.ndarray) -> np.ndarray:
    """Median/MAD normalization with a floor against zero spread."""
    errors = np.asarray(errors, dtype=np.float64)
    med = np.median(errors)
    mad = np.median(np.abs(errors - med))
    return (errors - med) / max(mad, MAD_FLOOR)


def error_map_from(i_deg: np.ndarray, i_in: np.ndarray) -> np.ndarray:
    """Channel-summed absolute difference, detached from all gradients."""
    return np.abs(i_deg - i_in).sum(axis=2, keepdims=True)


def compute_factors(
    frags: Fragments,
    error_map: np.ndarray,
    r0: float,
    drop: str = "",
) -> GgsState:
    """Assemble the per-Gaussian scaling factors for the current view.

    ``drop`` disables one cue ("depth", "radius", or "error") for the
    factor-wise ablation; that term is replaced by 1.
    """
    if drop and drop not in FACTOR_NAMES:
        raise ValueError(f"ggs drop must be one of {FACTOR_NAMES}, got {drop!r}")
    d_norm = normalize_depth(frags.depth)
    err = sample_errors(error_map, frags.center)
    err_norm = robust_normalize(err)

    term_d = np.ones_like(d_norm) if drop == "depth" else d_norm
    term_r = np.ones_like(d_norm) if drop == "radius" else frags.radius / r0
    term_e = np.ones_like(d_norm) if drop == "error" else sigmoid(err_norm)
    weight = term_d * term_r * term_e

    factor = np.ones(frags.n_total)
    mean_w = weight.mean() if weight.size else 0.0
    if weight.size and mean_w >= MEAN_FLOOR:
        factor[frags.idx] = weight / mean_w
    return GgsState(frags.idx, d_norm, frags.radius, err, err_norm, weight, factor)


def rescale_gradients(
    grads: dict[str, np.ndarray],
    screen: np.ndarray,
    factor: np.ndarray,
    _applied_flag: dict | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Multiply every per-Gaussian parameter gradient (and the screen-space
    densification contribution) by its factor, in place.

    A guard dict may be passed to catch accidental double application.
    """
    if _applied_flag is not None:
        if _applied_flag.get("applied"):
            raise RuntimeError("ggs rescale applied twice to the same gradients")
        _applied_flag["applied"] = True
    for name in PARAM_GROUPS:
        g = grads[name]
        g *= factor[:, None] if g.ndim == 2 else factor
    screen *= factor[:, None]
    return grads, screen


def dump_diagnostics(path, iteration: int, view: int, state: GgsState) -> None:
    """Append per-Gaussian scaling rows to a CSV file."""
    import os

    write_header = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if write_header:
            w.writerow(["iteration", "view", "gaussian", "d_norm", "radius", "err", "err_norm", "weight", "factor"])
        for j, gi in enumerate(state.idx):
            w.writerow(
                [
                    iteration,
                    view,
                    int(gi),
                    repr(state.d_norm[j]),
                    repr(state.radius[j]),
                    repr(state.err[j]),
                    repr(state.err_norm[j]),
                    repr(state.weight[j]),
                    repr(state.factor[gi]),
                ]
            )
