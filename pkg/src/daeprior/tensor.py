"""Dense image arrays and the linear operators of the degradation model.

Images are ``numpy`` arrays laid out as ``H x W x C`` (a plain ``H x W``
array is accepted and treated as a single channel; the output keeps the
input's dimensionality). Convolution here is the same-size 2D convolution
with a centered, odd-sized kernel.

Only :attr:`BoundaryMode.CIRCULAR` gives an exact transpose pair, so every
path that needs an adjoint insists on it.
"""

from __future__ import annotations

import enum

import numpy as np

__all__ = [
    "BoundaryMode",
    "NonFiniteError",
    "as_kernel",
    "check_blur_kernel",
    "conv2d",
    "conv2d_adjoint",
    "downsample_point",
    "upsample_zero",
    "gaussian_sample",
    "inner",
]


class BoundaryMode(str, enum.Enum):
    CIRCULAR = "circular"
    SYMMETRIC_REFLECT = "symmetric"


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf values."""


def _check_finite(x, what="result"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def _as_hwc(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[:, :, None], True
    if x.ndim != 3:
        raise ValueError(f"expected an H x W or H x W x C array, got shape {x.shape}")
    return x, False


def as_kernel(k):
    """Validate ``k`` as a 2D kernel with odd height and width."""
    k = np.asarray(k, dtype=np.float64)
    if k.ndim == 0:
        k = k.reshape(1, 1)
    if k.ndim != 2:
        raise ValueError(f"kernel must be 2D, got shape {k.shape}")
    if k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel dimensions must be odd, got {k.shape}")
    _check_finite(k, "kernel")
    return k


def check_blur_kernel(k, atol=1e-8):
    """Validate a blur kernel: odd size, nonnegative taps summing to one."""
    k = as_kernel(k)
    if np.any(k < 0):
        raise ValueError("blur kernel taps must be nonnegative")
    if abs(k.sum() - 1.0) > atol:
        raise ValueError(f"blur kernel must sum to 1 (sum is {k.sum():.12g})")
    return k


def _pad(x, ry, rx, mode):
    if mode == BoundaryMode.CIRCULAR:
        return np.pad(x, ((ry, ry), (rx, rx), (0, 0)), mode="wrap")
    if mode == BoundaryMode.SYMMETRIC_REFLECT:
        return np.pad(x, ((ry, ry), (rx, rx), (0, 0)), mode="symmetric")
    raise ValueError(f"unknown boundary mode {mode!r}")


def _correlate(x, k, mode):
    # out[i, j] = sum_{a, b} k[a, b] * xpad[i + a, j + b]
    h, w, _ = x.shape
    kh, kw = k.shape
    if max(kh, kw) > 2 * min(h, w):
        raise ValueError(f"kernel {k.shape} too large for a {h}x{w} image")
    xp = _pad(x, kh // 2, kw // 2, BoundaryMode(mode))
    out = np.zeros(x.shape, dtype=np.result_type(x.dtype, np.float64))
    for a in range(kh):
        for b in range(kw):
            if k[a, b] != 0.0:
                out += k[a, b] * xp[a:a + h, b:b + w]
    return out


def conv2d(x, k, mode=BoundaryMode.CIRCULAR):
    """Same-size convolution of every channel of ``x`` with kernel ``k``.

    ``y[i, j] = sum_{a, b} k[a, b] x[i - a + cy, j - b + cx]`` where
    ``(cy, cx)`` is the kernel center and out-of-range indices are resolved
    by ``mode``.
    """
    x3, squeeze = _as_hwc(x)
    k = as_kernel(k)
    out = _correlate(x3, k[::-1, ::-1], mode)
    _check_finite(out)
    return out[:, :, 0] if squeeze else out


def conv2d_adjoint(y, k, mode=BoundaryMode.CIRCULAR):
    """Transpose of :func:`conv2d`: correlation with ``k`` (flipped convolution).

    Only circular boundaries give an exact adjoint, so any other mode is
    rejected.
    """
    if BoundaryMode(mode) != BoundaryMode.CIRCULAR:
        raise ValueError("conv2d_adjoint is only exact for circular boundaries")
    y3, squeeze = _as_hwc(y)
    k = as_kernel(k)
    out = _correlate(y3, k, mode)
    _check_finite(out)
    return out[:, :, 0] if squeeze else out


def _check_factor(s):
    if int(s) != s or s < 1:
        raise ValueError(f"scale factor must be a positive integer, got {s!r}")
    return int(s)


def downsample_point(x, s):
    """Keep every ``s``-th pixel, starting at the top-left one."""
    s = _check_factor(s)
    x = np.asarray(x)
    if x.ndim not in (2, 3):
        raise ValueError(f"expected an image array, got shape {x.shape}")
    h, w = x.shape[:2]
    if h % s or w % s:
        raise ValueError(f"image size {h}x{w} is not divisible by {s}")
    return np.ascontiguousarray(x[::s, ::s])


def upsample_zero(x, s):
    """Adjoint of :func:`downsample_point`: scatter pixels onto a zero grid."""
    s = _check_factor(s)
    x = np.asarray(x)
    if x.ndim not in (2, 3):
        raise ValueError(f"expected an image array, got shape {x.shape}")
    out = np.zeros((x.shape[0] * s, x.shape[1] * s) + x.shape[2:], dtype=x.dtype)
    out[::s, ::s] = x
    return out


def gaussian_sample(shape, sigma, seed=None):
    """I.i.d. zero-mean Gaussian array with standard deviation ``sigma``.

    ``seed`` may be anything accepted by :func:`numpy.random.default_rng`,
    including a ``Generator`` (which is then advanced).
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    return sigma * rng.standard_normal(shape)


def inner(a, b):
    """Euclidean inner product of two equally shaped arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))
