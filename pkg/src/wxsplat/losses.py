"""Stage objectives: photometric L1 + SSIM mix, dark-channel regularizer on
the clean render, and total variation on the extinction field.

Stage 1 (geometry initialization) compares the continuous-medium rendering
against the input and keeps the dark-channel prior; stage 2 compares the
full degraded composition and drops the prior, which otherwise biases late
optimization toward under-exposed renders. Every term reduces by mean so
the weights are resolution independent.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .imaging import l1_mean, ssim
from .scattering import ExtinctionGrid, tv_loss
from .validation import as_image, check_same_shape

DCP_PATCH_DEFAULT = 7


@dataclass
class LossWeights:
    lambda_r: float = 0.4
    lambda_dcp: float = 1.0
    lambda_tv: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lambda_r <= 1.0:
            raise ValueError(f"lambda_r must be in [0, 1], got {self.lambda_r}")
        if self.lambda_dcp < 0 or self.lambda_tv < 0:
            raise ValueError("regularizer weights must be non-negative")


@dataclass
class LossReport:
    total: float
    photometric_l1: float
    photometric_ssim: float   # stored as 1 - SSIM
    dcp: float
    tv: float


# ---------------------------------------------------------------------------
# Dark channel prior
# ---------------------------------------------------------------------------

def dark_channel(img: np.ndarray, patch: int = DCP_PATCH_DEFAULT, with_cache: bool = False):
    """Min over channels then min over a border-clamped patch neighborhood.

    Returns the (H, W, 1) dark channel; with ``with_cache`` also the argmin
    bookkeeping needed to route subgradients (first achiever in scan order).
    """
    img = as_image(img, "img")
    if img.shape[2] != 3:
        raise ValueError("dark_channel expects a 3-channel image")
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"dark_channel patch must be odd and >= 1, got {patch}")
    h, w, _ = img.shape
    cmin = img.min(axis=2)
    carg = img.argmin(axis=2)
    r = patch // 2
    padded = np.pad(cmin, r, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch, patch))
    flat = win.reshape(h, w, patch * patch)
    dc = flat.min(axis=2)[:, :, None]
    if not with_cache:
        return dc
    warg = flat.argmin(axis=2)
    return dc, (carg, warg, patch)


def dark_channel_backward(cache, d_dc: np.ndarray, shape) -> np.ndarray:
    """Scatter dark-channel adjoints to the achieving pixel and channel."""
    carg, warg, patch = cache
    h, w, _ = shape
    r = patch // 2
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    src_y = np.clip(ii + warg // patch - r, 0, h - 1)
    src_x = np.clip(jj + warg % patch - r, 0, w - 1)
    src_c = carg[src_y, src_x]
    d_img = np.zeros(shape)
    np.add.at(d_img, (src_y.ravel(), src_x.ravel(), src_c.ravel()), np.asarray(d_dc).reshape(h, w).ravel())
    return d_img


def dcp_loss(img: np.ndarray, patch: int = DCP_PATCH_DEFAULT):
    """Mean absolute dark channel with its gradient w.r.t. the image."""
    dc, cache = dark_channel(img, patch, with_cache=True)
    value = float(np.abs(dc).mean())
    d_dc = np.sign(dc[:, :, 0]) / dc.size
    d_img = dark_channel_backward(cache, d_dc, img.shape)
    return value, d_img


# ---------------------------------------------------------------------------
# Stage objectives
# ---------------------------------------------------------------------------

def _photometric(i_in: np.ndarray, pred: np.ndarray, lam_r: float):
    l1, d_l1 = l1_mean(pred, i_in, with_grad=True)
    s, d_s = ssim(pred, i_in, with_grad=True)
    d_pred = (1.0 - lam_r) * d_l1 - lam_r * d_s
    return l1, 1.0 - s, d_pred


def stage1_loss(
    i_in: np.ndarray,
    i_con: np.ndarray,
    i_hat: np.ndarray,
    grid: ExtinctionGrid | None,
    weights: LossWeights,
    dcp_patch: int = DCP_PATCH_DEFAULT,
):
    """Geometry-initialization objective against the continuous rendering.

    Returns ``(report, grads)`` where grads holds ``d_i_con``, ``d_i_hat``
    and ``d_grid_raw`` (None when no grid is attached).
    """
    i_in = as_image(i_in, "i_in")
    i_con = as_image(i_con, "i_con")
    check_same_shape(i_in, i_con)
    l1, ssim_term, d_con = _photometric(i_in, i_con, weights.lambda_r)
    dcp_val, d_hat_raw = dcp_loss(as_image(i_hat, "i_hat"), dcp_patch)
    d_hat = weights.lambda_dcp * d_hat_raw
    if grid is not None:
        tv_val, d_raw = tv_loss(grid, with_grad=True)
        d_grid = weights.lambda_tv * d_raw
    else:
        tv_val, d_grid = 0.0, None
    total = (
        (1.0 - weights.lambda_r) * l1
        + weights.lambda_r * ssim_term
        + weights.lambda_dcp * dcp_val
        + weights.lambda_tv * tv_val
    )
    report = LossReport(total, l1, ssim_term, dcp_val, tv_val)
    return report, {"d_i_con": d_con, "d_i_hat": d_hat, "d_grid_raw": d_grid}


def stage2_loss(
    i_in: np.ndarray,
    i_deg: np.ndarray,
    grid: ExtinctionGrid | None,
    weights: LossWeights,
):
    """Joint-refinement objective against the degraded composition; the
    dark-channel prior is dropped."""
    i_in = as_image(i_in, "i_in")
    i_deg = as_image(i_deg, "i_deg")
    check_same_shape(i_in, i_deg)
    l1, ssim_term, d_deg = _photometric(i_in, i_deg, weights.lambda_r)
    if grid is not None:
        tv_val, d_raw = tv_loss(grid, with_grad=True)
        d_grid = weights.lambda_tv * d_raw
    else:
        tv_val, d_grid = 0.0, None
    total = (
        (1.0 - weights.lambda_r) * l1
        + weights.lambda_r * ssim_term
        + weights.lambda_tv * tv_val
    )
    report = LossReport(total, l1, ssim_term, 0.0, tv_val)
    return report, {"d_i_deg": d_deg, "d_grid_raw": d_grid}


# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------

LOG_COLUMNS = ["iteration", "stage", "photometric_l1", "photometric_ssim", "dcp", "tv", "total"]


def append_log(path, iteration: int, stage: int, report: LossReport) -> None:
    write_header = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if write_header:
            w.writerow(LOG_COLUMNS)
        w.writerow(
            [
                iteration,
                stage,
                repr(report.photometric_l1),
                repr(report.photometric_ssim),
                repr(report.dcp),
                repr(report.tv),
                repr(report.total),
            ]
        )
