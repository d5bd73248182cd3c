"""Acceptance suite: one reported line per criterion at its stated tolerance."""

import json
import math
import time

import numpy as np
import pytest

from daeprior import cli
from daeprior.degradation import DegradationModel, box_kernel, data_energy, data_gradient, degrade
from daeprior.density import Fig2Config, GaussianDensity, run_fig2, smoothed_log_grad
from daeprior.fixtures import FIXTURE_NAMES, PORTRAITS, fixture_path, fixture_weights_path, load_fixture, load_fixture_net
from daeprior.imageio import save_image
from daeprior.metrics import psnr
from daeprior.nn import conv_dae_specs, init_network
from daeprior.prior import MeanShiftOracle, PriorConfig, prior_energy, prior_gradient
from daeprior.restore import bicubic_upsample, init_estimate, map_restore, prior_descent, task_config
from daeprior.tensor import conv2d, conv2d_adjoint, downsample_point, inner, upsample_zero

from test_nn import LAYER_CASES, layer_gradient_errors

# 70% of pixels missing; the mask is drawn once so every run sees the same holes
INPAINT_MISSING = 0.7
DEBLUR_SIGMA_D = 2.55  # 1% of the dynamic range
TIME_BUDGET = 60.0


def full_fd(f, x, h):
    """Central-difference gradient of scalar ``f`` at every entry of ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


def test_1_adjoint_suite(acceptance):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        s = int(rng.integers(1, 5))
        h, w = s * int(rng.integers(2, 9)), s * int(rng.integers(2, 9))
        kh, kw = 2 * rng.integers(0, 4, size=2) + 1
        kh, kw = min(kh, 2 * min(h, w) - 1), min(kw, 2 * min(h, w) - 1)
        k = rng.normal(size=(kh, kw))
        x = rng.normal(size=(h, w))
        y = rng.normal(size=(h // s, w // s))
        lhs = inner(downsample_point(conv2d(x, k), s), y)
        rhs = inner(x, conv2d_adjoint(upsample_zero(y, s), k))
        worst = max(worst, abs(lhs - rhs))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 10
    acceptance("1", "adjoint suite", ok, f"max |<DKx,y> - <x,K^T D^T y>| = {worst:.2e} over 100 trials, {elapsed:.2f} s")
    assert ok


def test_2_gradient_suite(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    errors = {}
    models = {
        "deblur": DegradationModel(kernel=box_kernel(3), sigma_d=2.0),
        "sr": DegradationModel(kernel=box_kernel(3), scale=2, sigma_d=1.5),
        "inpaint": DegradationModel(mask=(rng.random((12, 12)) > 0.5).astype(float), sigma_d=3.0),
    }
    for name, model in models.items():
        x = rng.uniform(0, 255, (12, 12, 1))
        b = degrade(rng.uniform(0, 255, (12, 12, 1)), model, seed=1)
        fd = full_fd(lambda z: data_energy(z, b, model) / 2, x, 1e-4)
        errors[f"data/{name}"] = rel(fd, data_gradient(x, b, model))

    cfg = PriorConfig.from_sigma_eps(25.0)
    for seed in range(2):
        net = init_network(conv_dae_specs(3, 4, 1), sigma_train=25.0, scale=255.0, seed=seed, dtype=np.float64)
        for p in net.params:
            for k in ("running_mean", "bias", "beta"):
                if k in p:
                    p[k][...] = np.random.default_rng(seed).normal(scale=0.2, size=p[k].shape)
        x = np.random.default_rng(seed + 5).uniform(0, 255, (8, 8, 1))
        # the un-doubled estimator gradient is a quarter of d||m||^2 for a frozen draw
        fd = full_fd(lambda z: prior_energy(net, z, cfg, seed=3) / 4, x, 1e-4)
        errors[f"prior/net{seed}"] = rel(fd, prior_gradient(net, x, cfg, seed=3))

    for case, specs in sorted(LAYER_CASES.items()):
        for train in (False, True):
            errors[f"layer/{case}/{'train' if train else 'eval'}"] = layer_gradient_errors(specs, train, seed=11)
    elapsed = time.perf_counter() - start
    worst_key = max(errors, key=errors.get)
    ok = max(errors.values()) <= 1e-5 and elapsed < 120
    acceptance("2", "gradient suite", ok,
               f"{len(errors)} checks, worst {worst_key} rel. err {errors[worst_key]:.2e}, {elapsed:.1f} s")
    assert ok


def test_3_oracle_identity(acceptance):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        a = rng.normal(size=(2, 2))
        density = GaussianDensity(rng.normal(size=2), a @ a.T + 0.1 * np.eye(2))
        sigma = float(rng.uniform(0.1, 3.0))
        x = rng.normal(scale=3, size=2)
        oracle = MeanShiftOracle.from_density(density, sigma)
        worst = max(worst, float(np.max(np.abs(oracle.shift(x) - sigma**2 * smoothed_log_grad(density, x, sigma)))))
    ok = worst <= 1e-10
    acceptance("3", "oracle identity", ok, f"max |A(x) - x - sigma^2 grad log(g*p)| = {worst:.2e} at 1000 points")
    assert ok


def test_4_two_kernel_closed_form(acceptance):
    cfg = PriorConfig.from_sigma_eps(25.0)
    cov = 50 * cfg.sigma_eps**2 * np.eye(2)
    x = np.array([180.0, -75.0])
    exact = MeanShiftOracle(np.zeros(2), cov, cfg.sigma_eta).shift(x)
    # affine denoiser: the expectation over eps passes through A
    approx = 2 * (MeanShiftOracle(np.zeros(2), cov, cfg.sigma_eps).denoise(x) - x)
    dev = float(np.linalg.norm(exact - approx) / np.linalg.norm(approx))
    target = abs(1 - 51 / 52)
    ok = abs(dev - target) <= 1e-6
    acceptance("4", "two-kernel closed form", ok, f"relative deviation {dev:.8f} vs |1 - 51/52| = {target:.8f}")
    assert ok


def test_5_quadratic_map(acceptance):
    rng = np.random.default_rng(5)
    shape = (5, 5, 1)
    n = 25
    a = rng.normal(size=(n, n))
    oracle = MeanShiftOracle(rng.normal(size=n), a @ a.T / n + 0.3 * np.eye(n), 1.0)
    pcfg = PriorConfig(sigma_eta=1.0)
    k1 = np.array([0.1, 0.8, 0.1])
    model = DegradationModel(kernel=np.outer(k1, k1), sigma_d=1.0)
    b = model.apply(rng.normal(size=shape)) + 0.2 * rng.normal(size=shape)
    x, trace = map_restore(b, model, oracle, pcfg, task_config("deblur"))
    A = np.array([model.apply(e.reshape(shape)).ravel() for e in np.eye(n)]).T
    M = oracle.shift_matrix
    H = A.T @ A + pcfg.gamma * M.T @ M
    expected = np.linalg.solve(H, A.T @ b.ravel() + pcfg.gamma * M.T @ M @ oracle.mean)
    err = float(np.max(np.abs(x.ravel() - expected)))
    ok = err <= 1e-6 and len(trace) <= 300
    acceptance("5", "quadratic MAP convergence", ok, f"l_inf distance to normal-equations solution {err:.2e} after {len(trace)} iterations")
    assert ok


def test_6_density_fields(acceptance):
    start = time.perf_counter()
    gmm = run_fig2(Fig2Config(density="gmm", seed=0))
    spiral = run_fig2(Fig2Config(density="spiral", seed=0))
    elapsed = time.perf_counter() - start
    cos, err = gmm.summary["median_cosine"], gmm.summary["median_mag_rel_err"]
    near, far = spiral.summary["near_decile_median_error"], spiral.summary["far_decile_median_error"]
    ok = cos >= 0.9 and err <= 0.3 and near < far and elapsed < 900
    acceptance("6", "density fields", ok,
               f"GMM weighted median cosine {cos:.4f}, magnitude rel. err {err:.4f}; "
               f"spiral two-kernel error near {near:.4f} < far {far:.4f}; {elapsed:.0f} s")
    assert ok


# --- desk-scale restoration with the bundled network ---------------------------


def inpaint_mask(shape, seed=0):
    return (np.random.default_rng(seed).random(shape) >= INPAINT_MISSING).astype(float)


@pytest.fixture(scope="module")
def restorations():
    net = load_fixture_net()
    pcfg = PriorConfig()
    out = {"deblur": {}, "sr": {}, "inpaint": {}, "times": [], "traces": []}
    for i, name in enumerate(FIXTURE_NAMES):
        x = load_fixture(name)[:, :, None]

        model = DegradationModel(kernel=box_kernel(3), sigma_d=DEBLUR_SIGMA_D)
        b = degrade(x, model, seed=100 + i)
        t = time.process_time()
        restored, trace = map_restore(b, model, net, pcfg, task_config("deblur", seed=i))
        out["times"].append(time.process_time() - t)
        out["traces"].append(trace)
        out["deblur"][name] = (psnr(b, x), psnr(np.clip(restored, 0, 255), x))

        model = DegradationModel(kernel=cli.SR_KERNEL, scale=2)
        b = degrade(x, model)
        t = time.process_time()
        restored, _ = map_restore(b, model, net, pcfg, task_config("sr", seed=i))
        out["times"].append(time.process_time() - t)
        out["sr"][name] = (psnr(bicubic_upsample(b, 2), x, crop=2), psnr(np.clip(restored, 0, 255), x, crop=2))

        if name in PORTRAITS:
            model = DegradationModel(mask=inpaint_mask(x.shape[:2], seed=i))
            b = degrade(x, model)
            t = time.process_time()
            cfg = task_config("inpaint", seed=i)
            restored, _ = map_restore(b, model, net, pcfg, cfg)
            out["times"].append(time.process_time() - t)
            start = init_estimate(b, model, cfg.init)
            out["inpaint"][name] = (psnr(start, x), psnr(np.clip(restored, 0, 255), x))
    return out


def _gains(pairs):
    return np.array([after - before for before, after in pairs.values()])


def test_7a_deblur_gain(restorations, acceptance):
    gains = _gains(restorations["deblur"])
    med = float(np.median(gains))
    ok = med >= 2.0
    acceptance("7a", "deblur 3x3 box, sigma_d 2.55", ok,
               f"median PSNR gain {med:+.2f} dB over the degraded input (min {gains.min():+.2f}, max {gains.max():+.2f})")
    assert ok


def test_7b_sr_gain(restorations, acceptance):
    gains = _gains(restorations["sr"])
    med = float(np.median(gains))
    ok = med >= 0.5
    acceptance("7b", "x2 super-resolution", ok,
               f"median PSNR gain {med:+.2f} dB over bicubic (min {gains.min():+.2f}, max {gains.max():+.2f})")
    assert ok


def test_7c_inpainting(restorations, acceptance):
    scores = restorations["inpaint"]
    ok = min(after for _, after in scores.values()) >= 25.0
    acceptance("7c", "inpainting 70% missing, portraits", ok,
               ", ".join(f"{k} {after:.2f} dB (start {before:.2f})" for k, (before, after) in scores.items()))
    assert ok


def test_7d_runtime(restorations, acceptance):
    worst = max(restorations["times"])
    ok = worst <= TIME_BUDGET
    acceptance("7d", "restoration time 128x128", ok,
               f"slowest of {len(restorations['times'])} runs {worst:.1f} s CPU (budget {TIME_BUDGET:.0f} s)")
    assert ok


def test_7e_energy_trend(restorations, acceptance):
    worst, rising = -math.inf, []
    for name, trace in zip(FIXTURE_NAMES, restorations["traces"]):
        e = np.array(trace.total_energy)
        steps = np.diff(np.convolve(e, np.ones(25) / 25, mode="valid"))
        worst = max(worst, float(np.max(steps)))
        if np.any(steps > 0):
            rising.append(f"{name} x{int(np.sum(steps > 0))}")
    ok = worst <= 0
    acceptance("7e", "deblur energy trend", ok,
               f"largest step of the 25-iteration moving average {worst:.3g} over 10 runs"
               + (f"; rising steps: {', '.join(rising)}" if rising else ""))
    assert ok


def test_7f_prior_only_descent(acceptance):
    net = load_fixture_net()
    rising = []
    for i, name in enumerate(FIXTURE_NAMES):
        x = load_fixture(name)[:, :, None]
        noisy = x + 25 * np.random.default_rng(i).standard_normal(x.shape)
        _, energies = prior_descent(net, noisy, PriorConfig(), iterations=50, seed=i)
        rising.append(int(np.sum(np.diff(energies) >= 0)))
    ok = sum(rising) == 0
    acceptance("7f", "prior-only descent", ok, f"non-decreasing steps in the first 50 iterations: {sum(rising)} over 10 images")
    assert ok


# --- determinism -----------------------------------------------------------------


def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_8_determinism(tmp_path, acceptance, capsys):
    src = tmp_path / "src"
    src.mkdir()
    x = load_fixture("astronaut")
    save_image(x, src / "clean.png")
    save_image(degrade(x, DegradationModel(kernel=box_kernel(3), sigma_d=DEBLUR_SIGMA_D), seed=1), src / "blurred.png")
    save_image(degrade(x, DegradationModel(kernel=cli.SR_KERNEL, scale=2)), src / "small.png")
    save_image(inpaint_mask(x.shape) * 255, src / "mask.png")
    (src / "k.txt").write_text("1 1 1\n1 1 1\n1 1 1\n")
    train_img = load_fixture("coins")
    save_image(train_img, src / "train.png")

    commands = {
        "deblur": ["restore", "deblur", "{src}/blurred.png", "-o", "{out}/deblur.png", "--kernel", "{src}/k.txt",
                   "--sigma-d", "2.55", "--weights", str(fixture_weights_path()), "--iterations", "20",
                   "--ground-truth", "{src}/clean.png", "--snapshots", "10"],
        "sr": ["restore", "sr", "{src}/small.png", "-o", "{out}/sr.png", "--iterations", "20"],
        "inpaint": ["restore", "inpaint", str(fixture_path("camera")), "-o", "{out}/inpaint.png", "--mask",
                    "{src}/mask.png", "--iterations", "20"],
        "train": ["train", "{src}/train.png", "--out", "{out}/w.daew", "--depth", "3", "--width", "4",
                  "--patches", "64", "--patch-size", "16", "--batch-size", "16", "--epochs", "2"],
        "lab": ["lab", "fig2", "--density", "gmm", "--seed", "7", "--out", "{out}/fig2", "--epochs", "2",
                "--steps-per-epoch", "50", "--samples", "2000"],
        "psnr": ["psnr", "{src}/clean.png", "{src}/blurred.png", "--crop", "3"],
    }
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        printed = {}
        for name, argv in commands.items():
            code = cli.main([a.format(src=src, out=out) for a in argv])
            assert code == 0, name
            printed[name] = capsys.readouterr().out.replace(str(out), "<out>")
        outputs.append((_snapshot(out), printed))
    # replaying a manifest reproduces the run it records
    replay_ok = cli.main(["replay", str(tmp_path / "a" / "deblur.manifest.json")]) == 0
    capsys.readouterr()
    replayed = _snapshot(tmp_path / "a")

    (files_a, printed_a), (files_b, printed_b) = outputs
    same_files = sorted(files_a) == sorted(files_b) and all(files_a[k] == files_b[k] for k in files_a
                                                              if not k.endswith("manifest.json"))
    manifests_same = all(
        json.loads(files_a[k].decode().replace(str(tmp_path / "a"), "<out>"))
        == json.loads(files_b[k].decode().replace(str(tmp_path / "b"), "<out>"))
        for k in files_a if k.endswith("manifest.json")
    )
    ok = same_files and manifests_same and printed_a == printed_b and replay_ok and replayed == files_a
    acceptance("8", "determinism", ok,
               f"{len(commands)} commands run twice, {len(files_a)} output files byte-identical; manifest replay identical")
    assert ok
