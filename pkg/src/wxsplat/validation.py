"""Input validation helpers shared across the package.

All image-like data travels as float64 ``(H, W, C)`` arrays with C of 1 or 3
and nominal range [0, 1]; everything here normalizes and checks that shape.
"""

from __future__ import annotations

import numpy as np


class DataError(RuntimeError):
    """Raised when on-disk inputs (datasets, checkpoints) are missing or malformed."""


class NumericalAbort(RuntimeError):
    """Raised when optimization produces a non-finite loss or parameter."""


def as_image(arr, name: str = "image") -> np.ndarray:
    """Coerce ``arr`` to a float64 (H, W, C) image array, validating shape."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"{name}: expected (H, W, C) array, got shape {a.shape}")
    h, w, c = a.shape
    if h < 1 or w < 1:
        raise ValueError(f"{name}: empty image with shape {a.shape}")
    if c not in (1, 3):
        raise ValueError(f"{name}: expected 1 or 3 channels, got {c}")
    return np.ascontiguousarray(a)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "images") -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def check_finite(arr: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")


def check_positive(value: float, name: str) -> None:
    if not value > 0:
        raise ValueError(f"{name}: must be strictly positive, got {value!r}")


def worker_count() -> int:
    """Worker-thread cap: NIMBUS_THREADS if set, else the hardware count."""
    import os

    raw = os.environ.get("NIMBUS_THREADS", "").strip()
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError(f"NIMBUS_THREADS must be >= 1, got {raw}")
        return n
    return os.cpu_count() or 1
