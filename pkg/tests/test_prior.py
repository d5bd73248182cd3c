import math

import numpy as np
import pytest

from daeprior.nn import LayerKind, LayerSpec, conv_dae_specs, init_network
from daeprior.prior import (
    MeanShiftOracle,
    PriorConfig,
    mean_shift,
    mean_shift_estimate,
    prior_energy,
    prior_energy_and_gradient,
    prior_gradient,
)


def random_spd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return scale * (a @ a.T / n + 0.5 * np.eye(n))


def small_net(seed, sigma, dtype=np.float64):
    rng = np.random.default_rng(seed)
    specs = [LayerSpec(LayerKind.CONV3X3, 1, 4), LayerSpec(LayerKind.RELU, 4, 4),
             LayerSpec(LayerKind.CONV3X3, 4, 4), LayerSpec(LayerKind.BATCHNORM, 4, 4),
             LayerSpec(LayerKind.RELU, 4, 4), LayerSpec(LayerKind.CONV3X3, 4, 1)]
    net = init_network(specs, sigma_train=sigma, scale=255.0, dtype=dtype)
    for p in net.params:
        for k in p:
            if k == "running_var":
                p[k][...] = rng.uniform(0.5, 2, p[k].shape)
            elif k != "gamma":
                p[k][...] = rng.normal(scale=0.3, size=p[k].shape)
    return net


class TestPriorConfig:
    def test_default_hyperparameters(self):
        cfg = PriorConfig()
        assert cfg.sigma_eps == pytest.approx(25.0)
        assert cfg.sigma_eta == pytest.approx(25 * math.sqrt(2))
        assert cfg.gamma == pytest.approx(6.875 / 1250)
        assert cfg.noise_samples_per_iter == 1

    def test_from_sigma_eps(self):
        cfg = PriorConfig.from_sigma_eps(25.0)
        assert abs(cfg.sigma_eps**2 - cfg.sigma_eta**2 / 2) <= 1e-9

    @pytest.mark.parametrize(
        "kwargs",
        [dict(sigma_eta=10.0, sigma_eps=10.0), dict(gamma=0.0), dict(sigma_eta=-1.0),
         dict(noise_samples_per_iter=0)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            PriorConfig(**kwargs)


class TestOracle:
    def test_shift_vanishes_at_mean(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=3)
        oracle = MeanShiftOracle(mu, random_spd(rng, 3), sigma=1.5)
        cfg = PriorConfig(sigma_eta=1.5)
        assert prior_energy(oracle, mu, cfg) == 0.0

    def test_one_dimensional_value(self):
        oracle = MeanShiftOracle([0.0], [[1.0]], sigma=1.0)
        cfg = PriorConfig(sigma_eta=1.0)
        np.testing.assert_allclose(mean_shift(oracle, np.array([2.0]), cfg), [-1.0], atol=1e-15)
        assert prior_energy(oracle, np.array([2.0]), cfg) == pytest.approx(1.0, abs=1e-15)

    def test_posterior_mean_formula(self):
        rng = np.random.default_rng(1)
        mu, cov = rng.normal(size=4), random_spd(rng, 4)
        oracle = MeanShiftOracle(mu, cov, sigma=0.7)
        x = rng.normal(size=4)
        expected = mu + cov @ np.linalg.inv(cov + 0.49 * np.eye(4)) @ (x - mu)
        np.testing.assert_allclose(oracle.denoise(x), expected, atol=1e-12)

    def test_smoothed_log_gradient_identity(self):
        # g_s * N(mu, cov) = N(mu, cov + s^2 Id), so A(x) - x = s^2 grad log of it
        rng = np.random.default_rng(2)
        mu, cov, s = rng.normal(size=3), random_spd(rng, 3), 0.8
        oracle = MeanShiftOracle(mu, cov, s)
        for x in rng.normal(size=(50, 3)) * 3:
            grad = -np.linalg.solve(cov + s**2 * np.eye(3), x - mu)
            np.testing.assert_allclose(oracle.shift(x), s**2 * grad, atol=1e-10)

    def test_rejects_bad_covariance(self):
        with pytest.raises(ValueError):
            MeanShiftOracle([0, 0], [[1, 0.5], [0.4, 1]], 1.0)
        with pytest.raises(np.linalg.LinAlgError):
            MeanShiftOracle([0, 0], [[1, 2], [2, 1]], 1.0)

    def test_shape_mismatch(self):
        oracle = MeanShiftOracle(np.zeros(4), np.eye(4), 1.0)
        with pytest.raises(ValueError):
            oracle.denoise(np.zeros(5))

    def test_gradient_is_quadratic_form(self):
        rng = np.random.default_rng(3)
        mu, cov, s = rng.normal(size=1), random_spd(rng, 1), 1.3
        oracle = MeanShiftOracle(mu, cov, s)
        cfg = PriorConfig(sigma_eta=s)
        M = -(s**2) / (cov[0, 0] + s**2)
        for x in np.linspace(-4, 4, 9):
            g = prior_gradient(oracle, np.array([x]), cfg)
            assert g[0] == pytest.approx(M * M * (x - mu[0]), abs=1e-10)

    def test_gradient_is_half_energy_gradient(self):
        rng = np.random.default_rng(4)
        mu, cov, s = rng.normal(size=5), random_spd(rng, 5), 0.9
        oracle = MeanShiftOracle(mu, cov, s)
        cfg = PriorConfig(sigma_eta=s)
        x, d = rng.normal(size=(2, 5))
        h = 1e-5
        fd = (prior_energy(oracle, x + h * d, cfg) - prior_energy(oracle, x - h * d, cfg)) / (2 * h)
        assert np.dot(prior_gradient(oracle, x, cfg), d) == pytest.approx(fd / 2, rel=1e-7)

    def test_zero_at_fixed_point(self):
        oracle = MeanShiftOracle(np.ones(3), np.eye(3), 1.0)
        np.testing.assert_array_equal(prior_gradient(oracle, np.ones(3), PriorConfig(sigma_eta=1.0)), 0.0)

    def test_sigma_mismatch(self):
        oracle = MeanShiftOracle(np.zeros(2), np.eye(2), 1.0)
        with pytest.raises(ValueError):
            prior_energy(oracle, np.zeros(2), PriorConfig(sigma_eta=2.0))


class TestTwoKernelEstimate:
    def test_closed_form_ratio(self):
        """Gaussian with cov = 50 sigma_eps^2 Id: exact vs. approximate is 51/52."""
        se = 25.0
        cfg = PriorConfig.from_sigma_eps(se)
        cov = 50 * se**2 * np.eye(2)
        exact = MeanShiftOracle(np.zeros(2), cov, cfg.sigma_eta)
        half = MeanShiftOracle(np.zeros(2), cov, cfg.sigma_eps)
        x = np.array([300.0, -120.0])
        lhs = exact.shift(x)
        rhs = 2 * (half.denoise(x) - x)  # affine A: E[A(x - eps)] = A(x)
        np.testing.assert_allclose(lhs / rhs, 51 / 52, rtol=1e-12)
        dev = np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)
        assert dev == pytest.approx(1 / 52, abs=1e-6)

    def test_affine_estimator_mean(self):
        rng = np.random.default_rng(5)
        cfg = PriorConfig(sigma_eta=math.sqrt(2) * 0.5, noise_samples_per_iter=20000)
        oracle = MeanShiftOracle(rng.normal(size=2), random_spd(rng, 2), cfg.sigma_eps)
        x = rng.normal(size=2)
        est = mean_shift_estimate(oracle, x, cfg, seed=1)
        np.testing.assert_allclose(est, 2 * (oracle.denoise(x) - x), atol=0.02)

    def test_deterministic(self):
        net = small_net(0, 25.0)
        cfg = PriorConfig.from_sigma_eps(25.0)
        x = np.random.default_rng(6).uniform(0, 255, (8, 8, 1))
        a = mean_shift_estimate(net, x, cfg, seed=11)
        b = mean_shift_estimate(net, x, cfg, seed=11)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, mean_shift_estimate(net, x, cfg, seed=12))

    def test_sigma_mismatch(self):
        net = small_net(0, 15.0)
        with pytest.raises(ValueError):
            mean_shift_estimate(net, np.zeros((4, 4, 1)), PriorConfig.from_sigma_eps(25.0))

    def test_variance_scales_with_sample_count(self):
        net = small_net(1, 25.0)
        x = np.random.default_rng(7).uniform(0, 255, (6, 6, 1))
        variances = {}
        for n in (1, 16):
            cfg = PriorConfig.from_sigma_eps(25.0, noise_samples_per_iter=n)
            draws = np.array([mean_shift_estimate(net, x, cfg, seed=s) for s in range(300)])
            variances[n] = draws.var(axis=0).mean()
        ratio = variances[1] / variances[16]
        assert 8 <= ratio <= 32


class TestNetworkPrior:
    def test_zero_network_direct_energy(self):
        net = init_network(conv_dae_specs(3, 4, 1), sigma_train=25.0, dtype=np.float64)
        for p in net.params:
            for k in p:
                p[k][...] = 1.0 if k == "running_var" else 0.0
        x = np.random.default_rng(8).uniform(0, 255, (8, 8, 1))
        cfg = PriorConfig.from_sigma_eps(25.0)
        assert prior_energy(net, x, cfg, two_kernel=False) == 0.0
        # with the estimator the identity denoiser leaves only the injected noise
        eps = 25.0 * np.random.default_rng(3).standard_normal(x.shape)
        assert prior_energy(net, x, cfg, seed=3) == pytest.approx(4 * np.sum(eps**2), rel=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_fixed_draw_difference(self, seed):
        """``J^T m - m`` is a quarter of the gradient of ``||m||^2`` for a frozen draw."""
        net = small_net(seed, 25.0)
        cfg = PriorConfig.from_sigma_eps(25.0)
        rng = np.random.default_rng(seed + 20)
        x = rng.uniform(0, 255, (7, 7, 1))
        d = rng.normal(size=x.shape)
        g = prior_gradient(net, x, cfg, seed=5)
        h = 1e-5

        def energy(z):
            return prior_energy(net, z, cfg, seed=5)

        fd = (energy(x + h * d) - energy(x - h * d)) / (2 * h)
        an = 4 * float(np.sum(g * d))
        assert abs(fd - an) / max(abs(fd), abs(an)) <= 1e-5

    def test_energy_gradient_bundle_consistent(self):
        net = small_net(4, 25.0)
        cfg = PriorConfig.from_sigma_eps(25.0, noise_samples_per_iter=3)
        x = np.random.default_rng(9).uniform(0, 255, (6, 6, 1))
        e, g, ms = prior_energy_and_gradient(net, x, cfg, seed=2)
        assert e == pytest.approx(prior_energy(net, x, cfg, seed=2), rel=1e-12)
        np.testing.assert_allclose(ms, mean_shift_estimate(net, x, cfg, seed=2), atol=1e-12)
        np.testing.assert_allclose(g, prior_gradient(net, x, cfg, seed=2), atol=1e-12)

    def test_energy_nonnegative(self):
        net = small_net(5, 25.0)
        cfg = PriorConfig.from_sigma_eps(25.0)
        rng = np.random.default_rng(10)
        for s in range(5):
            assert prior_energy(net, rng.uniform(0, 255, (5, 5, 1)), cfg, seed=s) >= 0
