"""Image, kernel and mask files.

Images are 8-bit grayscale or RGB rasters read as float arrays in [0, 255]
(``H x W`` for grayscale, ``H x W x 3`` for colour) and written losslessly
after clipping and rounding.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import check_blur_kernel

__all__ = ["UnsupportedImageError", "load_image", "save_image", "load_kernel", "load_mask", "LOSSLESS_SUFFIXES"]

LOSSLESS_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".pgm", ".ppm", ".pnm")


class UnsupportedImageError(ValueError):
    pass


def _open(path):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as err:
        raise UnsupportedImageError(f"cannot read image {path}: {err}") from err
    return img


def load_image(path):
    """Read an 8-bit grayscale or RGB image as float64 in [0, 255].

    Palette images are expanded and alpha channels dropped; 16-bit,
    32-bit and floating-point rasters are rejected.
    """
    img = _open(path)
    if img.mode in ("L", "RGB"):
        pass
    elif img.mode in ("P", "RGBA"):
        img = img.convert("RGB")
    elif img.mode == "LA":
        img = img.convert("L")
    elif img.mode == "1":
        img = img.convert("L")
    else:
        raise UnsupportedImageError(f"{path}: unsupported pixel format {img.mode!r} (need 8-bit grayscale or RGB)")
    return np.asarray(img, dtype=np.float64)


def _to_uint8(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 3 and t.shape[2] == 1:
        t = t[:, :, 0]
    if t.ndim not in (2, 3) or (t.ndim == 3 and t.shape[2] != 3):
        raise ValueError(f"cannot save an array of shape {t.shape} as an image")
    if not np.all(np.isfinite(t)):
        raise ValueError("image has non-finite values")
    return np.rint(np.clip(t, 0, 255)).astype(np.uint8)


def save_image(t, path):
    """Clip to [0, 255], round and write losslessly (format from the suffix)."""
    path = Path(path)
    if path.suffix.lower() not in LOSSLESS_SUFFIXES:
        raise ValueError(f"{path}: use a lossless format ({', '.join(LOSSLESS_SUFFIXES)})")
    Image.fromarray(_to_uint8(t)).save(path)


def load_kernel(path):
    """Blur kernel from a whitespace-separated text array or an 8-bit grayscale image.

    Both forms are renormalized to sum 1, so a text file may hold
    unnormalized weights such as a row of ones.
    """
    path = Path(path)
    if path.suffix.lower() in LOSSLESS_SUFFIXES:
        k = load_image(path)
        if k.ndim != 2:
            raise ValueError(f"{path}: kernel images must be grayscale")
    else:
        try:
            k = np.loadtxt(path, ndmin=2)
        except ValueError as err:
            raise ValueError(f"{path}: cannot parse kernel: {err}") from err
    if np.any(k < 0) or not k.sum() > 0:
        raise ValueError(f"{path}: kernel weights must be nonnegative with a positive sum")
    k = check_blur_kernel(k / k.sum())
    return k


def load_mask(path):
    """Binary mask from an 8-bit image; nonzero pixels are observed."""
    m = load_image(path)
    if m.ndim == 3:
        m = m.max(axis=2)
    return (m > 0).astype(np.float64)
