"""The autoencoding prior: squared magnitude of the mean-shift vector.

For a denoiser ``A`` trained (or defined) with noise level ``sigma``, the
mean-shift vector at ``I`` is ``A(I) - I`` and the prior energy is
``||A(I) - I||**2``.  A trained network is used through the two-kernel
estimate

    A_eta(I) - I  ~  2 * (mean_k A_eps(I - eps_k) - I),   eps_k ~ N(0, sigma_eps**2)

with ``sigma_eps**2 = sigma_eta**2 / 2``.  A :class:`MeanShiftOracle`
(closed-form posterior mean of a Gaussian) is evaluated exactly.

Gradients use the same un-doubled convention as the data term:
``prior_gradient`` returns ``J^T m - m`` with ``m`` the (estimated) mean
shift and ``J`` the denoiser Jacobian at the point it was evaluated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PriorConfig",
    "MeanShiftOracle",
    "mean_shift_estimate",
    "mean_shift",
    "prior_energy",
    "prior_gradient",
    "prior_energy_and_gradient",
]


@dataclass
class PriorConfig:
    """Prior-side parameters.

    ``sigma_eps`` defaults to ``sigma_eta / sqrt(2)`` and ``gamma`` to
    ``6.875 / sigma_eta**2``; all values are in image units ([0, 255]).
    """

    sigma_eta: float = 25.0 * math.sqrt(2.0)
    sigma_eps: float | None = None
    gamma: float | None = None
    noise_samples_per_iter: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_eta > 0:
            raise ValueError("sigma_eta must be positive")
        if self.sigma_eps is None:
            self.sigma_eps = self.sigma_eta / math.sqrt(2.0)
        if abs(self.sigma_eps**2 - self.sigma_eta**2 / 2) > 1e-9 * max(1.0, self.sigma_eta**2):
            raise ValueError(
                f"sigma_eps**2 must equal sigma_eta**2 / 2 (got sigma_eps={self.sigma_eps}, "
                f"sigma_eta={self.sigma_eta})"
            )
        if self.gamma is None:
            self.gamma = 6.875 / self.sigma_eta**2
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.noise_samples_per_iter < 1:
            raise ValueError("noise_samples_per_iter must be at least 1")

    @classmethod
    def from_sigma_eps(cls, sigma_eps=25.0, **kwargs):
        return cls(sigma_eta=sigma_eps * math.sqrt(2.0), sigma_eps=sigma_eps, **kwargs)


class MeanShiftOracle:
    """Optimal denoiser for a Gaussian density ``N(mean, cov)``.

    ``A(x) = mean + cov (cov + sigma^2 Id)^{-1} (x - mean)``, the posterior
    mean under Gaussian noise of standard deviation ``sigma``.  Arrays of
    any shape are flattened to vectors of length ``dim``.
    """

    def __init__(self, mean, cov, sigma):
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64)).ravel()
        cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance must be symmetric")
        np.linalg.cholesky(cov)  # raises LinAlgError unless positive definite
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.mean = mean
        self.cov = cov
        self.sigma = float(sigma)
        inflated = cov + self.sigma**2 * np.eye(mean.size)
        # J = cov (cov + s^2)^{-1}; solve instead of forming an inverse
        self.jacobian = np.linalg.solve(inflated.T, cov.T).T
        self.shift_matrix = self.jacobian - np.eye(mean.size)

    @classmethod
    def from_density(cls, density, sigma):
        return cls(density.mean, density.cov, sigma)

    @property
    def dim(self):
        return self.mean.size

    def _flat(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.size != self.dim:
            raise ValueError(f"input has {x.size} entries, oracle dimension is {self.dim}")
        return x.ravel()

    def denoise(self, x):
        xf = self._flat(x)
        return (self.mean + self.jacobian @ (xf - self.mean)).reshape(np.shape(x))

    def shift(self, x):
        """Exact mean-shift vector ``A(x) - x``."""
        xf = self._flat(x)
        return (self.shift_matrix @ (xf - self.mean)).reshape(np.shape(x))

    def vjp(self, x, v):
        self._flat(x)
        return (self.jacobian.T @ self._flat(v)).reshape(np.shape(x))

    def linearize(self, x):
        return self.denoise(x), lambda v: self.vjp(x, v)


def _is_oracle(denoiser):
    return isinstance(denoiser, MeanShiftOracle)


def _check_sigma(denoiser, sigma, what):
    got = denoiser.sigma
    if abs(got - sigma) > 1e-6 * max(1.0, sigma):
        raise ValueError(f"denoiser sigma {got} does not match {what} {sigma}")


def _noise_draws(shape, cfg, seed):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    return [cfg.sigma_eps * rng.standard_normal(shape) for _ in range(cfg.noise_samples_per_iter)]


def _two_kernel(denoiser, image, cfg, seed, with_vjp):
    _check_sigma(denoiser, cfg.sigma_eps, "sigma_eps")
    image = np.asarray(image, dtype=np.float64)
    outs, vjps = [], []
    for eps in _noise_draws(image.shape, cfg, seed):
        if with_vjp:
            out, vjp = denoiser.linearize(image - eps)
            vjps.append(vjp)
        else:
            out = denoiser.denoise(image - eps)
        outs.append(np.asarray(out, dtype=np.float64))
    ms = 2.0 * (np.mean(outs, axis=0) - image)
    return ms, vjps


def mean_shift_estimate(net, image, cfg: PriorConfig, seed=None):
    """Two-kernel estimate ``2 (mean_k A(I - eps_k) - I)`` of the mean shift.

    ``net`` must have been trained with ``cfg.sigma_eps``; the estimate is
    deterministic given ``seed`` (``cfg.seed`` when omitted).
    """
    return _two_kernel(net, image, cfg, seed, with_vjp=False)[0]


def mean_shift(denoiser, image, cfg: PriorConfig, seed=None, two_kernel=None):
    """Mean-shift vector: exact for oracles, two-kernel estimate for networks.

    ``two_kernel=True`` forces the estimator for an oracle too (its sigma
    must then be ``cfg.sigma_eps``).  ``two_kernel=False`` with a network
    evaluates ``A(I) - I`` directly on the clean input.
    """
    if two_kernel is None:
        two_kernel = not _is_oracle(denoiser)
    if two_kernel:
        return mean_shift_estimate(denoiser, image, cfg, seed)
    if _is_oracle(denoiser):
        _check_sigma(denoiser, cfg.sigma_eta, "sigma_eta")
    image = np.asarray(image, dtype=np.float64)
    return np.asarray(denoiser.denoise(image), dtype=np.float64) - image


def prior_energy(denoiser, image, cfg: PriorConfig, seed=None, two_kernel=None):
    """``||A(I) - I||^2``, exact for an oracle and estimated for a network."""
    ms = mean_shift(denoiser, image, cfg, seed, two_kernel)
    return float(np.dot(ms.ravel(), ms.ravel()))


def prior_energy_and_gradient(denoiser, image, cfg: PriorConfig, seed=None, two_kernel=None):
    """Energy, un-doubled gradient and mean-shift vector from one evaluation.

    The gradient is ``J^T m - m`` where ``m`` is the mean shift and ``J``
    the denoiser Jacobian; for the estimator, ``J^T m`` is averaged over
    the noisy points ``I - eps_k`` the network was evaluated at.
    """
    if two_kernel is None:
        two_kernel = not _is_oracle(denoiser)
    image = np.asarray(image, dtype=np.float64)
    if two_kernel:
        ms, vjps = _two_kernel(denoiser, image, cfg, seed, with_vjp=True)
        jt = np.mean([np.asarray(vjp(ms), dtype=np.float64) for vjp in vjps], axis=0)
    else:
        if _is_oracle(denoiser):
            _check_sigma(denoiser, cfg.sigma_eta, "sigma_eta")
        out, vjp = denoiser.linearize(image)
        ms = np.asarray(out, dtype=np.float64) - image
        jt = np.asarray(vjp(ms), dtype=np.float64)
    return float(np.dot(ms.ravel(), ms.ravel())), jt - ms, ms


def prior_gradient(denoiser, image, cfg: PriorConfig, seed=None, two_kernel=None):
    """Un-doubled prior gradient ``J^T m - m``; see :func:`prior_energy_and_gradient`."""
    return prior_energy_and_gradient(denoiser, image, cfg, seed, two_kernel)[1]
