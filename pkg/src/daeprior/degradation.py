"""Observation model ``B = mask * D(I conv K) + noise`` and its data term.

The blur is applied at full resolution and the result is point-sampled by
``D``.  Inpainting adds an optional binary mask on the observed grid.  The
data gradient follows the un-doubled convention: it is half the gradient of
:func:`data_energy`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    BoundaryMode,
    as_kernel,
    conv2d,
    conv2d_adjoint,
    downsample_point,
    gaussian_sample,
    upsample_zero,
)

__all__ = ["DegradationModel", "degrade", "data_energy", "data_gradient", "box_kernel", "gaussian_kernel"]


@dataclass
class DegradationModel:
    kernel: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))
    scale: int = 1
    mask: np.ndarray | None = None
    sigma_d: float = 0.0
    boundary: BoundaryMode = BoundaryMode.CIRCULAR

    def __post_init__(self):
        self.kernel = as_kernel(self.kernel)
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"scale must be an integer >= 1, got {self.scale!r}")
        self.scale = int(self.scale)
        if self.sigma_d < 0:
            raise ValueError("sigma_d must be nonnegative")
        self.boundary = BoundaryMode(self.boundary)
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if not np.all((mask == 0) | (mask == 1)):
                raise ValueError("mask must be binary")
            self.mask = mask.astype(np.float64)

    def observed_shape(self, shape):
        h, w = shape[:2]
        if h % self.scale or w % self.scale:
            raise ValueError(f"image size {h}x{w} is not divisible by scale {self.scale}")
        return (h // self.scale, w // self.scale) + tuple(shape[2:])

    def _mask_for(self, shape):
        if self.mask is None:
            return None
        m = self.mask
        if m.ndim == 2 and len(shape) == 3:
            m = m[:, :, None]
        if m.shape[:2] != shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} does not match observation {shape}")
        return m

    def apply(self, image):
        """Noise-free observation ``mask * D(K image)``."""
        image = np.asarray(image, dtype=np.float64)
        self.observed_shape(image.shape)
        y = downsample_point(conv2d(image, self.kernel, self.boundary), self.scale)
        m = self._mask_for(y.shape)
        return y if m is None else m * y

    def adjoint(self, y):
        """``K^T D^T mask * y`` (circular boundaries only)."""
        y = np.asarray(y, dtype=np.float64)
        m = self._mask_for(y.shape)
        if m is not None:
            y = m * y
        return conv2d_adjoint(upsample_zero(y, self.scale), self.kernel, self.boundary)


def degrade(image, model: DegradationModel, seed=None):
    """Simulate an observation: blur, point-sample, mask, then add noise."""
    b = model.apply(image)
    if model.sigma_d > 0:
        b = b + gaussian_sample(b.shape, model.sigma_d, seed)
    return b


def _weight(model, weight):
    if weight is not None:
        if weight < 0:
            raise ValueError("data weight must be nonnegative")
        return float(weight)
    if model.sigma_d <= 0:
        raise ValueError("sigma_d is zero: pass an explicit data weight")
    return 1.0 / model.sigma_d**2


def _residual(image, observed, model):
    observed = np.asarray(observed, dtype=np.float64)
    pred = model.apply(image)
    if pred.shape != observed.shape:
        raise ValueError(f"observation shape {observed.shape} does not match model output {pred.shape}")
    r = pred - observed
    m = model._mask_for(r.shape)
    return r if m is None else m * r


def data_energy(image, observed, model: DegradationModel, weight=None):
    """Weighted squared residual ``w * ||mask * (D K image - B)||^2``.

    ``w`` is ``1 / sigma_d**2`` unless ``weight`` is given (needed when
    ``sigma_d`` is zero).
    """
    w = _weight(model, weight)
    r = _residual(image, observed, model)
    return w * float(np.dot(r.ravel(), r.ravel()))


def data_gradient(image, observed, model: DegradationModel, weight=None):
    """``w * K^T D^T mask * (D K image - B)``, half the gradient of :func:`data_energy`."""
    w = _weight(model, weight)
    return w * model.adjoint(_residual(image, observed, model))


def box_kernel(size):
    return np.full((size, size), 1.0 / size**2)


def gaussian_kernel(size, std):
    r = np.arange(size) - size // 2
    g = np.exp(-0.5 * (r / std) ** 2)
    k = np.outer(g, g)
    return k / k.sum()
