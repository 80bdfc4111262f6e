"""Per-view particulate residual layers.

Each training view owns a non-negative residual image R that absorbs
transient, view-dependent particles (rain streaks, snowflakes). R is never a
learnable parameter: it is recomputed by clamped subtraction against the
current continuous-medium rendering and refreshed on a fixed cadence, so no
gradient ever flows through it.

The subtract-then-add round trip ``I_con + ReLU(I_in - I_con)`` must
reproduce ``max(I_in, I_con)`` bit-exactly, and plain double arithmetic
cannot guarantee that (for some operand pairs no double r satisfies
``fl(a + r) = b``). Extraction therefore keeps the exact subtraction
residue alongside R (Knuth two-sum algebra, error-free for any doubles) and
composition folds it back in. For layers without a residue the compensated
path reduces exactly to plain addition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import as_image, check_same_shape


def _two_sum(x: np.ndarray, y: np.ndarray):
    """Error-free transform: x + y = s + e exactly, s = fl(x + y)."""
    s = x + y
    b = s - x
    e = (x - (s - b)) + (y - b)
    return s, e


@dataclass
class ParticulateLayer:
    view_id: int
    residual: np.ndarray
    refreshed_at: int = 0
    residual_lo: np.ndarray | None = None  # exact subtraction residue, not part of R

    def __post_init__(self):
        self.residual = as_image(self.residual, "residual")
        if self.residual_lo is not None:
            self.residual_lo = as_image(self.residual_lo, "residual_lo")


def extract_residual(i_in: np.ndarray, i_con: np.ndarray, view_id: int = 0, iteration: int = 0) -> ParticulateLayer:
    """R = max(I_in - I_con, 0) elementwise; a buffer, not a parameter."""
    i_in = as_image(i_in, "i_in")
    i_con = as_image(i_con, "i_con")
    check_same_shape(i_in, i_con)
    hi, lo = _two_sum(i_in, -i_con)
    positive = i_in > i_con
    r = np.where(positive, hi, 0.0)
    r_lo = np.where(positive, lo, 0.0)
    return ParticulateLayer(view_id, r, iteration, r_lo)


def compose_degraded(i_con: np.ndarray, layer: ParticulateLayer) -> np.ndarray:
    """I_deg = I_con + R. Gradients flow only through I_con."""
    i_con = as_image(i_con, "i_con")
    check_same_shape(i_con, layer.residual)
    s, e = _two_sum(i_con, layer.residual)
    if layer.residual_lo is None:
        return s + e  # fl(s + e) == s: plain addition semantics
    return s + (e + layer.residual_lo)


def refresh_all(
    layers: dict[int, ParticulateLayer],
    i_con_by_view,
    inputs_by_view,
    iteration: int,
    z_ref: int,
    force: bool = False,
) -> dict[int, ParticulateLayer]:
    """Re-extract every view's residual when ``iteration`` hits the refresh
    cadence. ``i_con_by_view`` maps view id to a freshly rendered I_con under
    the current model; off-cadence calls return the layers unchanged.
    """
    if not force and iteration % z_ref != 0:
        return layers
    out = {}
    for vid, layer in layers.items():
        out[vid] = extract_residual(inputs_by_view[vid], i_con_by_view[vid], vid, iteration)
    return out
