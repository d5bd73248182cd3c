"""Two-dimensional densities for checking learned mean-shift fields.

A denoiser trained at noise level ``sigma`` on samples of ``p`` satisfies
``A(x) - x = sigma**2 * grad log[g_sigma * p](x)``.  For Gaussians and
Gaussian mixtures the right-hand side has a closed form (inflate every
covariance by ``sigma**2 Id``), which lets small MLP denoisers be checked
against the truth.  :func:`run_fig2` trains such MLPs and writes the
resulting fields, comparisons and an SVG rendering.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .nn import TrainConfig, dae_train, mlp_specs
from .prior import MeanShiftOracle, PriorConfig, mean_shift_estimate

__all__ = [
    "GaussianDensity",
    "GMMDensity",
    "SpiralDensity",
    "make_density",
    "sample_density",
    "smoothed_log_pdf",
    "smoothed_pdf",
    "smoothed_log_grad",
    "VectorField2D",
    "FieldReport",
    "field_compare",
    "weighted_median",
    "evaluation_grid",
    "Fig2Config",
    "Fig2Result",
    "run_fig2",
]


def _check_cov(cov, d):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (d, d):
        raise ValueError(f"covariance shape {cov.shape}, expected {(d, d)}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise ValueError("covariance must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive definite") from None
    return cov


@dataclass(frozen=True)
class GMMDensity:
    """Gaussian mixture ``sum_k w_k N(mu_k, Sigma_k)``."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = mu.shape
        covs = np.asarray(self.covs, dtype=np.float64).reshape(k, d, d)
        if w.shape != (k,):
            raise ValueError(f"{w.size} weights for {k} components")
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        covs = np.array([_check_cov(c, d) for c in covs])
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", covs)

    @property
    def dim(self):
        return self.means.shape[1]

    def components(self):
        return self.weights, self.means, self.covs


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "cov", _check_cov(np.atleast_2d(self.cov), mu.size))

    @property
    def dim(self):
        return self.mean.size

    def components(self):
        return np.ones(1), self.mean[None], self.cov[None]


@dataclass(frozen=True)
class SpiralDensity:
    """Archimedean spiral ``r = radius * theta / theta_max`` with radial noise.

    Angles run from ``theta_max / 4`` to ``theta_max = 2 pi turns`` and are
    drawn so that samples are roughly uniform in arc length.
    """

    turns: float = 2.0
    radial_std: float = 0.02
    sample_count: int = 20000
    radius: float = 1.0

    def __post_init__(self):
        if not self.turns > 0 or not self.radius > 0:
            raise ValueError("turns and radius must be positive")
        if self.radial_std < 0:
            raise ValueError("radial_std must be nonnegative")
        if self.sample_count < 1:
            raise ValueError("sample_count must be at least 1")

    dim = 2

    @property
    def theta_max(self):
        return 2 * math.pi * self.turns

    @property
    def theta_min(self):
        return self.theta_max / 4

    def radius_at(self, theta):
        return self.radius * np.asarray(theta) / self.theta_max

    def curve(self, n=20000):
        """Noise-free points along the spiral."""
        theta = np.linspace(self.theta_min, self.theta_max, n)
        r = self.radius_at(theta)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def make_density(name):
    """Documented default densities: ``"gaussian"``, ``"gmm"`` or ``"spiral"``."""
    if name == "gaussian":
        return GaussianDensity([0.3, -0.2], [[0.5, 0.15], [0.15, 0.3]])
    if name == "gmm":
        angles = np.deg2rad([90.0, 210.0, 330.0])
        means = 1.5 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        covs = []
        for a in angles:
            rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            covs.append(rot @ np.diag([0.35**2, 0.2**2]) @ rot.T)
        return GMMDensity([0.3, 0.3, 0.4], means, covs)
    if name == "spiral":
        return SpiralDensity()
    raise ValueError(f"unknown density {name!r}")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_density(density, n, seed=0):
    """``n`` i.i.d. samples (``n x d``); ``seed`` may be an int or a Generator.

    Mixtures draw the standard normals before the component labels, so a
    one-component mixture reproduces the matching Gaussian exactly.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(seed)
    if isinstance(density, SpiralDensity):
        u = rng.random(n)
        t0, t1 = density.theta_min, density.theta_max
        theta = np.sqrt(t0**2 + u * (t1**2 - t0**2))
        r = density.radius_at(theta) + density.radial_std * rng.standard_normal(n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    w, mu, covs = density.components()
    z = rng.standard_normal((n, density.dim))
    chol = np.linalg.cholesky(covs)
    if len(w) == 1:
        labels = np.zeros(n, dtype=int)
    else:
        labels = rng.choice(len(w), size=n, p=w)
    return mu[labels] + np.einsum("nij,nj->ni", chol[labels], z)


def _smoothed_terms(density, x, sigma):
    if isinstance(density, SpiralDensity):
        raise ValueError("the spiral density has no closed-form smoothing")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w, mu, covs = density.components()
    d = density.dim
    inflated = covs + sigma**2 * np.eye(d)
    diff = x[:, None, :] - mu[None]  # n x k x d
    sol = np.linalg.solve(inflated[None], diff[..., None])[..., 0]
    maha = np.einsum("nkd,nkd->nk", diff, sol)
    logdet = np.linalg.slogdet(inflated)[1]
    logc = np.log(w) - 0.5 * (d * math.log(2 * math.pi) + logdet) - 0.5 * maha
    return logc, sol


def smoothed_log_pdf(density, x, sigma):
    """``log[g_sigma * p](x)`` for Gaussian or mixture densities; ``x`` is ``n x d``."""
    logc, _ = _smoothed_terms(density, x, sigma)
    return logsumexp(logc, axis=1)


def smoothed_pdf(density, x, sigma):
    return np.exp(smoothed_log_pdf(density, x, sigma))


def smoothed_log_grad(density, x, sigma):
    """``grad log[g_sigma * p](x)``: responsibility-weighted ``-(Sigma_k + sigma^2)^{-1}(x - mu_k)``."""
    squeeze = np.ndim(x) == 1
    logc, sol = _smoothed_terms(density, x, sigma)
    resp = np.exp(logc - logsumexp(logc, axis=1, keepdims=True))
    g = -np.einsum("nk,nkd->nd", resp, sol)
    return g[0] if squeeze else g


@dataclass
class VectorField2D:
    points: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2 or self.points.shape != self.vectors.shape:
            raise ValueError(f"points {self.points.shape} and vectors {self.vectors.shape} must both be N x 2")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.vectors))):
            raise ValueError("vector field has non-finite entries")

    def __len__(self):
        return len(self.points)

    def to_csv(self, path):
        _write_csv(path, ("x", "y", "dx", "dy"), np.hstack([self.points, self.vectors]))


def weighted_median(values, weights=None):
    """Smallest value whose cumulative weight reaches half the total."""
    values = np.asarray(values, dtype=np.float64).ravel()
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    keep = np.isfinite(values) & (weights > 0)
    if not np.any(keep):
        return math.nan
    v, w = values[keep], weights[keep]
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    return float(v[order][np.searchsorted(cum, 0.5 * cum[-1])])


@dataclass
class FieldReport:
    points: np.ndarray
    cosine: np.ndarray
    mag_rel_err: np.ndarray
    weights: np.ndarray
    median_cosine: float
    median_mag_rel_err: float

    def to_csv(self, path):
        _write_csv(path, ("x", "y", "cosine", "mag_rel_err"),
                   np.column_stack([self.points, self.cosine, self.mag_rel_err]))


def field_compare(learned: VectorField2D, oracle: VectorField2D, weights=None):
    """Per-point cosine similarity and relative magnitude error.

    ``mag_rel_err = | |l| - |o| | / |o|``.  Points where either vector is
    zero get NaN cosine (and NaN error if ``|o| = 0``); NaNs and zero
    weights are left out of the weighted medians.
    """
    if learned.points.shape != oracle.points.shape or not np.allclose(learned.points, oracle.points, rtol=0, atol=1e-12):
        raise ValueError("fields are not on the same grid")
    w = np.ones(len(learned)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(learned),):
        raise ValueError("one weight per grid point is required")
    nl = np.linalg.norm(learned.vectors, axis=1)
    no = np.linalg.norm(oracle.vectors, axis=1)
    dot = np.einsum("nd,nd->n", learned.vectors, oracle.vectors)
    with np.errstate(divide="ignore", invalid="ignore"):
        cosine = np.where((nl > 0) & (no > 0), dot / (nl * no), np.nan)
        err = np.where(no > 0, np.abs(nl - no) / no, np.nan)
    cosine = np.clip(cosine, -1.0, 1.0)
    return FieldReport(oracle.points, cosine, err, w, weighted_median(cosine, w), weighted_median(err, w))


def evaluation_grid(samples, sigma, n=64):
    """``n x n`` grid over the sample bounding box inflated by ``3 sigma``; returns (points, xs, ys)."""
    lo = samples.min(axis=0) - 3 * sigma
    hi = samples.max(axis=0) + 3 * sigma
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()]), xs, ys


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in np.asarray(rows, dtype=np.float64):
            f.write(",".join("" if math.isnan(v) else repr(float(v)) for v in row) + "\n")


class Learner(str, enum.Enum):
    MLP = "mlp"
    ORACLE = "oracle"


@dataclass
class Fig2Config:
    """Settings for one field experiment.

    ``sigma_eta`` is the mean-shift kernel width; the second network used
    by the two-kernel approximation is trained at ``sigma_eta / sqrt(2)``.
    ``learner="oracle"`` replaces both networks by closed-form Gaussian
    denoisers (Gaussian density only).
    """

    density: str = "gmm"
    seed: int = 0
    sigma_eta: float | None = None  # default: 0.15 for the spiral, 0.4 otherwise
    n_samples: int | None = None  # default: 20000, or the spiral's sample count
    grid_size: int = 64
    learner: Learner = Learner.MLP
    hidden: tuple = (64, 64)
    epochs: int = 20
    steps_per_epoch: int = 1000
    batch_size: int = 256
    learning_rate: float = 3e-3
    approx_draws: int = 512

    def __post_init__(self):
        self.learner = Learner(self.learner)
        if self.learner == Learner.ORACLE and self.density != "gaussian":
            raise ValueError("the oracle learner needs a Gaussian density")
        if self.sigma_eta is None:
            self.sigma_eta = 0.15 if self.density == "spiral" else 0.4
        if not self.sigma_eta > 0:
            raise ValueError("sigma_eta must be positive")
        if self.grid_size < 2 or self.approx_draws < 1:
            raise ValueError("grid_size must be at least 2 and approx_draws at least 1")


@dataclass
class Fig2Result:
    samples: np.ndarray
    grid: np.ndarray
    heatmap: np.ndarray
    learned: VectorField2D
    approx: VectorField2D
    exact: VectorField2D | None
    report: FieldReport
    summary: dict
    files: list


def one_sigma_mask(density, points):
    """Points within Mahalanobis distance 1 of some mixture component."""
    _, mu, covs = density.components()
    diff = points[:, None, :] - mu[None]
    sol = np.linalg.solve(covs[None], diff[..., None])[..., 0]
    return np.any(np.einsum("nkd,nkd->nk", diff, sol) <= 1.0, axis=1)


def _train_mlp(samples, sigma, cfg: Fig2Config, seed):
    tcfg = TrainConfig(
        sigma_eps=sigma, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        epochs=cfg.epochs, steps_per_epoch=cfg.steps_per_epoch, seed=seed,
        dtype="float64", scale=1.0, residual=False, flips=False,
    )
    specs = mlp_specs((2,) + tuple(cfg.hidden) + (2,))
    return dae_train(samples, specs, tcfg)


def _kernel_density(samples, points, sigma):
    """``g_sigma * (empirical density)`` on ``points``; used only for display."""
    tree = cKDTree(samples)
    out = np.zeros(len(points))
    for i, nbrs in enumerate(tree.query_ball_point(points, 4 * sigma)):
        if nbrs:
            d2 = np.sum((samples[nbrs] - points[i]) ** 2, axis=1)
            out[i] = np.exp(-0.5 * d2 / sigma**2).sum()
    return out / (len(samples) * 2 * math.pi * sigma**2)


def run_fig2(cfg: Fig2Config, out_dir=None):
    """Train the field learners, compare fields and optionally write artifacts.

    Writes ``samples.csv`` (x, y), ``heatmap.csv`` (x, y, density),
    ``field_learned.csv``, ``field_approx.csv`` and, for analytic densities,
    ``field_exact.csv`` (x, y, dx, dy), ``report.csv`` (x, y, cosine,
    mag_rel_err), ``summary.json`` and ``fig2.svg``.

    The report compares the learned field with the exact one for analytic
    densities, and with the two-kernel approximation for the spiral.
    """
    density = make_density(cfg.density)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    n = cfg.n_samples or (density.sample_count if isinstance(density, SpiralDensity) else 20000)
    samples = sample_density(density, n, np.random.default_rng(seeds[0]))
    sigma = cfg.sigma_eta
    pcfg = PriorConfig(sigma_eta=sigma)
    grid, xs, ys = evaluation_grid(samples, sigma, cfg.grid_size)
    analytic = not isinstance(density, SpiralDensity)

    if cfg.learner == Learner.ORACLE:
        eta = MeanShiftOracle.from_density(density, sigma)
        eps = MeanShiftOracle.from_density(density, pcfg.sigma_eps)
        learned = (grid - density.mean) @ eta.shift_matrix.T
        # affine denoiser: E[A(x - e)] = A(x), so the estimate is exact
        approx = 2 * (grid - density.mean) @ eps.shift_matrix.T
    else:
        seed_eta, seed_eps = (int(s.generate_state(1)[0]) for s in seeds[1:3])
        net_eta = _train_mlp(samples, sigma, cfg, seed_eta)
        net_eps = _train_mlp(samples, pcfg.sigma_eps, cfg, seed_eps)
        learned = net_eta.denoise(grid) - grid
        mc = dataclasses.replace(pcfg, noise_samples_per_iter=cfg.approx_draws)
        approx = mean_shift_estimate(net_eps, grid, mc, seed=np.random.default_rng(seeds[3]))

    learned_f = VectorField2D(grid, learned)
    approx_f = VectorField2D(grid, approx)
    summary = {"density": cfg.density, "seed": cfg.seed, "sigma_eta": sigma,
               "sigma_eps": pcfg.sigma_eps, "n_samples": n, "learner": cfg.learner.value}
    if analytic:
        heat = smoothed_pdf(density, grid, sigma)
        exact_f = VectorField2D(grid, sigma**2 * smoothed_log_grad(density, grid, sigma))
        weights = heat * one_sigma_mask(density, grid)
        report = field_compare(learned_f, exact_f, weights)
        approx_report = field_compare(approx_f, exact_f, weights)
        summary.update(
            median_cosine=report.median_cosine,
            median_mag_rel_err=report.median_mag_rel_err,
            learned_max_abs_err=float(np.max(np.abs(learned - exact_f.vectors))),
            approx_median_cosine=approx_report.median_cosine,
            approx_median_mag_rel_err=approx_report.median_mag_rel_err,
        )
    else:
        heat = _kernel_density(samples, grid, sigma)
        exact_f = None
        report = field_compare(learned_f, approx_f)
        dist = cKDTree(density.curve()).query(grid)[0]
        err = np.linalg.norm(learned - approx, axis=1)
        near = dist <= np.quantile(dist, 0.1)
        far = dist >= np.quantile(dist, 0.9)
        summary.update(
            near_decile_median_error=float(np.median(err[near])),
            far_decile_median_error=float(np.median(err[far])),
            median_cosine=report.median_cosine,
        )
    result = Fig2Result(samples, grid, heat, learned_f, approx_f, exact_f, report, summary, [])
    if out_dir is not None:
        result.files = _write_fig2(result, Path(out_dir), xs, ys)
    return result


def _write_fig2(res: Fig2Result, out, xs, ys):
    out.mkdir(parents=True, exist_ok=True)
    files = []

    def emit(name, writer):
        writer(out / name)
        files.append(out / name)

    emit("samples.csv", lambda p: _write_csv(p, ("x", "y"), res.samples))
    emit("heatmap.csv", lambda p: _write_csv(p, ("x", "y", "density"), np.column_stack([res.grid, res.heatmap])))
    emit("field_learned.csv", res.learned.to_csv)
    emit("field_approx.csv", res.approx.to_csv)
    if res.exact is not None:
        emit("field_exact.csv", res.exact.to_csv)
    emit("report.csv", res.report.to_csv)
    emit("summary.json", lambda p: p.write_text(json.dumps(res.summary, indent=2, sort_keys=True) + "\n"))
    emit("fig2.svg", lambda p: p.write_text(_svg(res, xs, ys)))
    return files


def _svg(res: Fig2Result, xs, ys, panel=256, pad=8):
    """Four panels: samples, smoothed density, learned field, approximated field."""
    x0, x1, y0, y1 = xs[0], xs[-1], ys[0], ys[-1]

    def px(p):
        u = (p[:, 0] - x0) / (x1 - x0) * panel
        v = (y1 - p[:, 1]) / (y1 - y0) * panel
        return u, v

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{4 * panel + 5 * pad}" height="{panel + 2 * pad + 16}">']
    titles = ("samples", "smoothed density", "learned mean shift", "two-kernel approximation")

    def group(i):
        parts.append(f'<g transform="translate({pad + i * (panel + pad)},{pad + 16})">')
        parts.append(f'<text x="0" y="-4" font-size="11" font-family="sans-serif">{titles[i]}</text>')
        parts.append(f'<rect width="{panel}" height="{panel}" fill="white" stroke="black"/>')

    group(0)
    step = max(1, len(res.samples) // 2000)
    for u, v in zip(*px(res.samples[::step])):
        parts.append(f'<circle cx="{u:.1f}" cy="{v:.1f}" r="0.8"/>')
    parts.append("</g>")

    group(1)
    n = len(xs)
    cell = panel / n
    heat = res.heatmap.reshape(n, n)
    top = heat.max() if heat.max() > 0 else 1.0
    for r in range(n):
        for c in range(n):
            g = int(round(255 * (1 - heat[r, c] / top)))
            parts.append(f'<rect x="{c * cell:.2f}" y="{(n - 1 - r) * cell:.2f}" width="{cell:.2f}" '
                         f'height="{cell:.2f}" fill="rgb({g},{g},{g})"/>')
    parts.append("</g>")

    sub = np.zeros((n, n), dtype=bool)
    sub[:: max(1, n // 16), :: max(1, n // 16)] = True
    sub = sub.ravel()
    for i, field in ((2, res.learned), (3, res.approx)):
        group(i)
        pts, vec = field.points[sub], field.vectors[sub]
        longest = np.max(np.linalg.norm(vec, axis=1))
        k = (panel / 16) / longest if longest > 0 else 0.0
        u0, v0 = px(pts)
        for a, b, dx, dy in zip(u0, v0, vec[:, 0] * k, -vec[:, 1] * k):
            parts.append(f'<line x1="{a:.1f}" y1="{b:.1f}" x2="{a + dx:.1f}" y2="{b + dy:.1f}" '
                         'stroke="black" stroke-width="0.8"/>')
            parts.append(f'<circle cx="{a + dx:.1f}" cy="{b + dy:.1f}" r="1"/>')
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
