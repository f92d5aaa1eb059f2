"""Minimal dense float32 arithmetic used by the encoder.

A "tensor" here is a plain ``numpy.ndarray`` of dtype float32 with every
extent >= 1. The functions below add the explicit shape checks the rest of
the package relies on: nothing broadcasts implicitly, mismatches raise
:class:`~csaseg.errors.DimensionError`.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, DimensionError, NumericError

DTYPE = np.float32
LAYER_NORM_EPS = 1e-5


def as_tensor(x, *, ndim: int | None = None, name: str = "tensor") -> np.ndarray:
    """Coerce ``x`` to a contiguous float32 array and validate its shape."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        raise DimensionError(f"{name}: scalars are not tensors")
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name}: expected {ndim} dims, got shape {arr.shape}")
    if any(e < 1 for e in arr.shape):
        raise DimensionError(f"{name}: all extents must be >= 1, got {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a, ndim=2, name="matmul lhs")
    b = as_tensor(b, ndim=2, name="matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(s) -> np.ndarray:
    """Softmax over the last axis, stabilised by subtracting the row maximum.

    Leading axes are treated as a batch, so a ``heads x n x n`` score stack
    is accepted as well as a plain matrix.
    """
    s = as_tensor(s, name="softmax input")
    if not np.all(np.isfinite(s)):
        raise NumericError("softmax_rows: input contains NaN or infinite entries")
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    x = as_tensor(x, name="layer_norm input")
    d = x.shape[-1]
    gain = as_tensor(gain, ndim=1, name="layer_norm gain")
    bias = as_tensor(bias, ndim=1, name="layer_norm bias")
    if gain.shape[0] != d or bias.shape[0] != d:
        raise DimensionError(
            f"layer_norm: gain/bias extents {gain.shape[0]}/{bias.shape[0]} != width {d}"
        )
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    out = centered / np.sqrt(var + DTYPE(eps))
    return (out * gain + bias).astype(DTYPE, copy=False)


def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with Phi written through erf."""
    x = as_tensor(x, name="gelu input")
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(DTYPE, copy=False)


def quick_gelu(x) -> np.ndarray:
    # sigmoid approximation used by the original CLIP checkpoints
    x = as_tensor(x, name="quick_gelu input")
    return (x / (1.0 + np.exp(-1.702 * x))).astype(DTYPE, copy=False)


def l2_normalize_rows(x) -> np.ndarray:
    x = as_tensor(x, name="l2_normalize input")
    norms = np.sqrt(np.sum(x.astype(np.float64) ** 2, axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize_rows: zero-norm row")
    return (x / norms).astype(DTYPE)


def _half_pixel_taps(n_in: int, n_out: int):
    """Source indices and lerp fractions for align_corners=False sampling."""
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    centers = np.clip(centers, 0.0, n_in - 1)
    lo = np.floor(centers).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, centers - lo


def bilinear_resize(x, out_h: int, out_w: int) -> np.ndarray:
    """Resize a ``c x h x w`` tensor with half-pixel-centre bilinear sampling.

    Interpolation is written as ``a + f * (b - a)`` so that a constant field
    stays exactly constant.
    """
    x = as_tensor(x, ndim=3, name="bilinear_resize input")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: target size {out_h}x{out_w} is empty")
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()

    src = x.astype(np.float64)
    lo, hi, f = _half_pixel_taps(h, out_h)
    top, bot = src[:, lo, :], src[:, hi, :]
    rows = top + f[None, :, None] * (bot - top)

    lo, hi, f = _half_pixel_taps(w, out_w)
    left, right = rows[:, :, lo], rows[:, :, hi]
    out = left + f[None, None, :] * (right - left)
    return out.astype(DTYPE)
