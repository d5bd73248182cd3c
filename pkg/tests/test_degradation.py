import numpy as np
import pytest

from daeprior.degradation import DegradationModel, box_kernel, data_energy, data_gradient, degrade
from daeprior.tensor import BoundaryMode, conv2d, downsample_point, gaussian_sample


def random_model(rng, family, shape):
    h, w = shape[:2]
    k = rng.uniform(size=(3, 5))
    k /= k.sum()
    if family == "deblur":
        return DegradationModel(kernel=k, scale=1, sigma_d=rng.uniform(0.5, 3))
    if family == "sr":
        return DegradationModel(kernel=k, scale=2, sigma_d=rng.uniform(0.5, 3))
    mask = (rng.uniform(size=(h, w)) < 0.4).astype(float)
    return DegradationModel(kernel=k, scale=1, mask=mask, sigma_d=rng.uniform(0.5, 3))


def energy_loop(image, observed, model):
    """Scalar-loop data energy for one kernel, scale, and mask."""
    h, w, c = image.shape
    k = model.kernel
    kh, kw = k.shape
    s = model.scale
    total = 0.0
    for i in range(0, h, s):
        for j in range(0, w, s):
            for ch in range(c):
                if model.mask is not None and model.mask[i // s, j // s] == 0:
                    continue
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        acc += k[a, b] * image[(i - a + kh // 2) % h, (j - b + kw // 2) % w, ch]
                total += (acc - observed[i // s, j // s, ch]) ** 2
    return total / model.sigma_d**2


FAMILIES = ["deblur", "sr", "inpaint"]


class TestDegrade:
    def test_identity_model(self):
        x = np.random.default_rng(0).uniform(0, 255, (8, 8, 1))
        np.testing.assert_array_equal(degrade(x, DegradationModel()), x)

    def test_constant_image(self):
        x = np.full((8, 10, 1), 42.0)
        b = degrade(x, DegradationModel(kernel=box_kernel(3), scale=2))
        assert b.shape == (4, 5, 1)
        np.testing.assert_allclose(b, 42.0, atol=1e-12)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_composition_of_primitives(self, family):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 8, 2))
        m = random_model(rng, family, (8 // (2 if family == "sr" else 1),) * 2)
        b = degrade(x, m, seed=5)
        expected = downsample_point(conv2d(x, m.kernel), m.scale)
        if m.mask is not None:
            expected = m.mask[:, :, None] * expected
        expected = expected + gaussian_sample(expected.shape, m.sigma_d, 5)
        np.testing.assert_array_equal(b, expected)

    def test_deterministic_given_seed(self):
        x = np.random.default_rng(2).normal(size=(8, 8, 1))
        m = DegradationModel(kernel=box_kernel(3), sigma_d=2.0)
        assert degrade(x, m, seed=3).tobytes() == degrade(x, m, seed=3).tobytes()

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            degrade(np.zeros((7, 8, 1)), DegradationModel(scale=2))

    def test_noise_free_linearity(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=(2, 12, 12, 1))
        m = random_model(rng, "sr", (6, 6))
        m.sigma_d = 0.0
        np.testing.assert_allclose(degrade(2 * x - y, m), 2 * degrade(x, m) - degrade(y, m), atol=1e-12)

    def test_symmetric_boundary_forward(self):
        x = np.full((6, 6, 1), 7.0)
        m = DegradationModel(kernel=box_kernel(5), boundary=BoundaryMode.SYMMETRIC_REFLECT)
        np.testing.assert_allclose(degrade(x, m), 7.0, atol=1e-12)

    def test_invalid_mask(self):
        with pytest.raises(ValueError):
            DegradationModel(mask=np.full((4, 4), 0.5))


class TestDataEnergy:
    def test_true_image_noise_free(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 8, 1))
        m = DegradationModel(kernel=box_kernel(3), scale=2, sigma_d=1.0)
        b = m.apply(x)
        assert data_energy(x, b, m) == 0.0

    def test_single_pixel(self):
        x = np.zeros((4, 4, 1))
        b = np.zeros((4, 4, 1))
        b[2, 1] = 1.0
        assert data_energy(x, b, DegradationModel(sigma_d=1.0)) == 1.0

    @pytest.mark.parametrize("family", FAMILIES)
    def test_matches_loop(self, family):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 8, 2))
        m = random_model(rng, family, (4, 4) if family == "sr" else (8, 8))
        b = rng.normal(size=m.observed_shape(x.shape))
        assert data_energy(x, b, m) == pytest.approx(energy_loop(x, b, m), abs=1e-12, rel=1e-12)

    def test_zero_sigma_needs_weight(self):
        x = np.zeros((4, 4, 1))
        m = DegradationModel()
        with pytest.raises(ValueError):
            data_energy(x, x, m)
        with pytest.raises(ValueError):
            data_gradient(x, x, m)
        assert data_energy(x, x + 1, m, weight=2.0) == 32.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            data_energy(np.zeros((4, 4, 1)), np.zeros((3, 4, 1)), DegradationModel(sigma_d=1.0))


class TestDataGradient:
    def test_vanishes_at_consistent_image(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(8, 8, 1))
        m = random_model(rng, "sr", (4, 4))
        np.testing.assert_allclose(data_gradient(x, m.apply(x), m), 0.0, atol=1e-12)

    def test_identity_operator(self):
        rng = np.random.default_rng(7)
        x, b = rng.normal(size=(2, 6, 6, 3))
        np.testing.assert_allclose(data_gradient(x, b, DegradationModel(sigma_d=1.0)), x - b, atol=1e-14)

    @pytest.mark.parametrize("family", FAMILIES)
    @pytest.mark.parametrize("seed", range(3))
    def test_half_gradient_of_energy(self, family, seed):
        rng = np.random.default_rng(10 + seed)
        x = rng.normal(size=(8, 8, 2)) * 10
        m = random_model(rng, family, (4, 4) if family == "sr" else (8, 8))
        b = rng.normal(size=m.observed_shape(x.shape)) * 10
        g = data_gradient(x, b, m)
        d = rng.normal(size=x.shape)
        h = 1e-4
        fd = (data_energy(x + h * d, b, m) - data_energy(x - h * d, b, m)) / (2 * h) / 2
        an = float(np.sum(g * d))
        assert abs(fd - an) / max(abs(fd), abs(an)) <= 1e-6

    def test_masked_pixels_do_not_matter(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 6, 1))
        mask = np.ones((6, 6))
        mask[2, 3] = 0
        m = DegradationModel(mask=mask, sigma_d=1.0)
        b = rng.normal(size=x.shape)
        y = x.copy()
        y[2, 3] += 100.0
        assert data_energy(y, b, m) == data_energy(x, b, m)
        assert data_gradient(x, b, m)[2, 3, 0] == 0.0

    def test_symmetric_boundary_rejected(self):
        m = DegradationModel(kernel=box_kernel(3), sigma_d=1.0, boundary=BoundaryMode.SYMMETRIC_REFLECT)
        x = np.zeros((6, 6, 1))
        with pytest.raises(ValueError):
            data_gradient(x, x, m)
