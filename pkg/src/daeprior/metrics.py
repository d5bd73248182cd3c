"""Image quality metrics."""

import math

import numpy as np

#: Returned by :func:`psnr` for identical images (zero error).
PSNR_IDENTICAL = math.inf


def psnr(a, b, crop=0, peak=255.0):
    """Peak signal-to-noise ratio in dB over the border-cropped region.

    ``crop`` pixels are discarded on every side (for super-resolution this
    is usually the scale factor).  Identical inputs give
    :data:`PSNR_IDENTICAL`.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    crop = int(crop)
    if crop < 0 or 2 * crop >= min(a.shape[:2]):
        raise ValueError(f"crop {crop} is invalid for a {a.shape[0]}x{a.shape[1]} image")
    if crop:
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak**2 / mse)
