"""Image containers, interpolation, and full-reference quality metrics.

Images are plain float64 ``(H, W, C)`` arrays in nominal [0, 1]. Pixel (i, j)
is centered at continuous coordinate (u, v) = (j + 0.5, i + 0.5); every
projection and sampling routine in the package uses that convention.

Two file formats live here:

* 8-bit RGB PNG for human-facing inputs and outputs, and
* a raw lossless float dump (magic ``NIMF``, little-endian u32 H, W, C,
  then H*W*C little-endian f64) for intermediates that must round-trip
  bit-exactly (transmission, airlight, and residual maps).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .validation import as_image, check_same_shape

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

RAW_MAGIC = b"NIMF"


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def bilinear_sample(img: np.ndarray, u, v) -> np.ndarray:
    """Bilinearly sample ``img`` at continuous pixel coordinates (u, v).

    Coordinates outside the image are clamped to the border before
    interpolation, so the sample is always a convex combination of real
    pixels. Exact at lattice points (u, v) = (j + 0.5, i + 0.5).

    Parameters
    ----------
    img : (H, W, C) array
    u, v : scalars or arrays of matching shape, in pixels

    Returns
    -------
    (..., C) array of interpolated values.
    """
    img = as_image(img)
    h, w, _ = img.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = np.clip(u - 0.5, 0.0, float(w - 1))
    y = np.clip(v - 0.5, 0.0, float(h - 1))
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = fx[..., None]
    fy = fy[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range, capped at 100."""
    a = as_image(a, "a")
    b = as_image(b, "b")
    check_same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian tap vector used by the SSIM window."""
    half = (size - 1) / 2.0
    t = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def _corr_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # Separable valid-mode correlation of a 2-D array with outer(k, k).
    n = k.size
    h, w = x.shape
    rows = np.zeros((h - n + 1, w))
    for t in range(n):
        rows += k[t] * x[t : t + h - n + 1, :]
    out = np.zeros((h - n + 1, w - n + 1))
    for t in range(n):
        out += k[t] * rows[:, t : t + w - n + 1]
    return out


def _corr_valid_adjoint(g: np.ndarray, k: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # Adjoint of _corr_valid: scatter window weights back to input pixels.
    n = k.size
    h, w = shape
    rows = np.zeros((h - n + 1, w))
    for t in range(n):
        rows[:, t : t + w - n + 1] += k[t] * g
    out = np.zeros((h, w))
    for t in range(n):
        out[t : t + h - n + 1, :] += k[t] * rows
    return out


def ssim(a: np.ndarray, b: np.ndarray, with_grad: bool = False):
    """Mean windowed SSIM between two images, optionally with d(ssim)/da.

    Uses the standard 11x11 Gaussian window (sigma 1.5) and stabilizers
    C1 = 0.01^2, C2 = 0.03^2 for unit dynamic range. Windows are evaluated
    only where they fit entirely inside the image, so both inputs must be at
    least 11 pixels on each side.

    Returns ``score`` or ``(score, grad)`` where ``grad`` has a's shape.
    """
    a = as_image(a, "a")
    b = as_image(b, "b")
    check_same_shape(a, b)
    h, w, c = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim: image {h}x{w} smaller than the {SSIM_WINDOW}-pixel window")
    k = gaussian_window()
    total = 0.0
    grad = np.zeros_like(a) if with_grad else None
    n_out = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    for ch in range(c):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _corr_valid(x, k)
        mu_y = _corr_valid(y, k)
        sxx = _corr_valid(x * x, k)
        syy = _corr_valid(y * y, k)
        sxy = _corr_valid(x * y, k)
        var_x = sxx - mu_x**2
        var_y = syy - mu_y**2
        cov = sxy - mu_x * mu_y
        n1 = 2.0 * mu_x * mu_y + SSIM_C1
        n2 = 2.0 * cov + SSIM_C2
        d1 = mu_x**2 + mu_y**2 + SSIM_C1
        d2 = var_x + var_y + SSIM_C2
        s_map = (n1 * n2) / (d1 * d2)
        total += float(s_map.mean())
        if with_grad:
            # Partials w.r.t. the window statistics (mu_x, sxx, sxy), holding
            # the second image fixed; then scatter through the window.
            scale = 1.0 / (n_out * c)
            ds = np.full_like(s_map, scale)
            inv_dd = 1.0 / (d1 * d2)
            d_mu = ds * (
                (2.0 * mu_y * n2 - 2.0 * mu_y * n1) * inv_dd
                - s_map * (2.0 * mu_x / d1 - 2.0 * mu_x / d2)
            )
            d_sxx = ds * (-(n1 * n2) * inv_dd / d2)
            d_sxy = ds * (n1 * 2.0 * inv_dd)
            gx = _corr_valid_adjoint(d_mu, k, (h, w))
            gx += _corr_valid_adjoint(d_sxx, k, (h, w)) * (2.0 * x)
            gx += _corr_valid_adjoint(d_sxy, k, (h, w)) * y
            grad[:, :, ch] = gx
    score = total / c
    if with_grad:
        return score, grad
    return score


def l1_mean(a: np.ndarray, b: np.ndarray, with_grad: bool = False):
    """Mean absolute difference, optionally with its gradient w.r.t. ``a``."""
    a = as_image(a, "a")
    b = as_image(b, "b")
    check_same_shape(a, b)
    diff = a - b
    value = float(np.abs(diff).mean())
    if with_grad:
        return value, np.sign(diff) / diff.size
    return value


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def write_png(path, img: np.ndarray) -> None:
    """Quantize a [0, 1] float image to 8 bits and write it as PNG."""
    img = as_image(img)
    data = np.clip(img, 0.0, 1.0)
    q = np.round(data * 255.0).astype(np.uint8)
    if q.shape[2] == 1:
        pil = Image.fromarray(q[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(q, mode="RGB")
    pil.save(str(path), format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG into a float64 (H, W, C) array in [0, 1]."""
    with Image.open(str(path)) as pil:
        if pil.mode not in ("L", "RGB"):
            pil = pil.convert("RGB")
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    return as_image(arr)


def raw_bytes(img: np.ndarray) -> bytes:
    """Serialize an image in the NIMF raw layout."""
    img = as_image(img)
    h, w, c = img.shape
    return RAW_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(img, dtype="<f8").tobytes()


def raw_from_bytes(raw: bytes, origin: str = "<bytes>") -> np.ndarray:
    if raw[:4] != RAW_MAGIC:
        raise ValueError(f"{origin}: not a NIMF raw image (bad magic {raw[:4]!r})")
    h, w, c = struct.unpack("<III", raw[4:16])
    expect = 16 + h * w * c * 8
    if len(raw) != expect:
        raise ValueError(f"{origin}: truncated raw image ({len(raw)} bytes, expected {expect})")
    data = np.frombuffer(raw[16:], dtype="<f8").reshape(h, w, c)
    return np.ascontiguousarray(data)


def write_raw(path, img: np.ndarray) -> None:
    """Write a lossless NIMF float dump (see module docstring for layout)."""
    Path(path).write_bytes(raw_bytes(img))


def read_raw(path) -> np.ndarray:
    """Read a NIMF float dump back into an (H, W, C) float64 array."""
    return raw_from_bytes(Path(path).read_bytes(), str(path))
