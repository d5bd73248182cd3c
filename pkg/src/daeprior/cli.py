"""Command-line interface.

::

    daeprior train IMAGE... --out w.daew
    daeprior restore {deblur,sr,inpaint,denoise} INPUT... -o OUT [--weights w.daew]
    daeprior lab fig2 --density gmm --seed 7 --out DIR
    daeprior psnr a.png b.png --crop 3
    daeprior replay run.manifest.json

Every option may also come from a flat ``key = value`` file given with
``--config`` (keys are option names without the leading dashes); flags on
the command line win.  The default weights file is taken from the
``DAEPRIOR_WEIGHTS`` environment variable, falling back to the bundled
fixture denoiser.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .degradation import DegradationModel, degrade, gaussian_kernel
from .density import Fig2Config, run_fig2
from .fixtures import fixture_weights_path
from .imageio import LOSSLESS_SUFFIXES, load_image, load_kernel, load_mask, save_image
from .metrics import psnr
from .nn import TrainConfig, TrainingDivergedError, conv_dae_specs, dae_train, extract_patches, load_weights, save_weights
from .prior import PriorConfig
from .restore import (
    TASK_PRESETS,
    InitMode,
    PerChannelDenoiser,
    RestorationDivergedError,
    RestoreConfig,
    Schedule,
    map_restore,
    task_config,
)
from .tensor import NonFiniteError

log = logging.getLogger("daeprior")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
WEIGHTS_ENV = "DAEPRIOR_WEIGHTS"

#: Blur applied before x2 point sampling when ``restore sr`` gets no kernel.
SR_KERNEL = gaussian_kernel(5, 0.8)


class ConfigError(ValueError):
    pass


# --- helpers -----------------------------------------------------------------


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def read_config(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err}") from err
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def derived_seed(seed, index):
    """Independent per-image seed for image ``index`` of a batch."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return Path(path)


def _parse_int_list(text):
    if text in (None, ""):
        return ()
    return tuple(int(t) for t in str(text).replace(",", " ").split())


def _image_inputs(paths):
    """Expand directories into their lossless image files, sorted by name."""
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in LOSSLESS_SUFFIXES))
        else:
            files.append(_require_file(p, "input image"))
    if not files:
        raise ConfigError("no input images")
    return files


def resolve_weights(arg):
    path = arg or os.environ.get(WEIGHTS_ENV) or fixture_weights_path()
    return _require_file(path, "weights")


# --- restore -------------------------------------------------------------------

def build_restore_setup(args):
    """Validate restore options and build (model, prior config, restore config)."""
    task = args.task
    kernel = load_kernel(_require_file(args.kernel, "kernel")) if args.kernel else None
    if task == "deblur" and kernel is None:
        raise ConfigError("deblur needs --kernel")
    if task == "sr" and kernel is None:
        kernel = SR_KERNEL
    if task in ("denoise", "inpaint") and kernel is not None:
        raise ConfigError(f"{task} does not take a kernel")
    sigma_d = args.sigma_d
    if sigma_d is None:
        if task in ("deblur", "denoise"):
            raise ConfigError(f"{task} needs --sigma-d")
        sigma_d = 0.0
    if not 0 <= sigma_d <= 255:
        raise ConfigError("--sigma-d must lie in [0, 255]")
    scale = args.scale if args.scale is not None else (2 if task == "sr" else 1)
    if task != "sr" and scale != 1:
        raise ConfigError("--scale applies to sr only")
    if task == "sr" and scale < 2:
        raise ConfigError("sr needs --scale >= 2")
    mask = None
    if task == "inpaint":
        mask = load_mask(_require_file(args.mask, "mask"))
    elif args.mask:
        raise ConfigError("--mask applies to inpaint only")
    model = DegradationModel(kernel=kernel if kernel is not None else np.ones((1, 1)), scale=scale,
                             mask=mask, sigma_d=sigma_d, boundary=args.boundary)
    sigma_eta = args.sigma_eta
    if sigma_eta is None:
        sigma_eta = args.sigma_eps * np.sqrt(2.0) if args.sigma_eps is not None else 25.0 * np.sqrt(2.0)
    try:
        pcfg = PriorConfig(sigma_eta=sigma_eta, sigma_eps=args.sigma_eps,
                           noise_samples_per_iter=args.samples, seed=args.seed)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    overrides = dict(iterations=args.iterations, step_size=args.step_size, momentum=args.momentum,
                     seed=args.seed, snapshots=_parse_int_list(args.snapshots))
    if args.schedule:
        overrides["schedule"] = args.schedule
    if args.init:
        overrides["init"] = args.init
    if args.gamma is not None:
        overrides["gamma"] = args.gamma
    try:
        rcfg = task_config(task, **overrides)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return model, pcfg, rcfg


def _restore_one(index, path, out_path, args, model, pcfg, rcfg, net):
    observed = load_image(path)
    seed = derived_seed(args.seed, index)
    pcfg_i = PriorConfig(sigma_eta=pcfg.sigma_eta, sigma_eps=pcfg.sigma_eps, gamma=pcfg.gamma,
                         noise_samples_per_iter=pcfg.noise_samples_per_iter, seed=seed)
    rcfg_i = RestoreConfig(**{**rcfg.__dict__, "seed": seed})
    image = observed[:, :, None] if observed.ndim == 2 else observed
    denoiser = net
    if image.shape[2] != net.in_channels:
        if net.in_channels != 1:
            raise ConfigError(f"{path}: {image.shape[2]}-channel image for a {net.in_channels}-channel network")
        denoiser = PerChannelDenoiser(net)
    truth = None
    if args.ground_truth:
        truth = load_image(_require_file(args.ground_truth, "ground truth"))
        truth = truth[:, :, None] if truth.ndim == 2 else truth
    result, trace = map_restore(image, model, denoiser, pcfg_i, rcfg_i, ground_truth=truth)
    result = np.clip(result, 0, 255)
    if observed.ndim == 2:
        result = result[:, :, 0]
    save_image(result, out_path)
    stem = out_path.with_suffix("")
    trace_path = Path(args.trace) if args.trace and len(args.inputs) == 1 else Path(f"{stem}.trace.csv")
    trace.to_csv(trace_path)
    for t, snap in sorted(trace.snapshots.items()):
        save_image(snap[:, :, 0] if observed.ndim == 2 else snap, f"{stem}.iter{t}.png")
    summary = {"input": str(path), "input_sha256": sha256(path), "output": str(out_path),
               "seed": seed, "trace": str(trace_path)}
    if truth is not None:
        crop = model.scale if model.scale > 1 else 0
        summary["psnr"] = psnr(np.clip(np.round(result), 0, 255).reshape(truth.shape), truth, crop=crop)
    log.info("%s -> %s", path, out_path)
    return summary


def cmd_restore(args):
    model, pcfg, rcfg = build_restore_setup(args)
    inputs = _image_inputs(args.inputs)
    weights = resolve_weights(args.weights)
    net = load_weights(weights)
    out = Path(args.output)
    if len(inputs) == 1 and out.suffix:
        outputs = [out]
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        outputs = [out / f"{p.stem}.png" for p in inputs]
    if args.ground_truth and len(inputs) != 1:
        raise ConfigError("--ground-truth needs a single input")
    jobs = max(1, int(args.jobs))
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_restore_one, i, p, o, args, model, pcfg, rcfg, net)
                   for i, (p, o) in enumerate(zip(inputs, outputs))]
        results = [f.result() for f in futures]
    manifest = {
        "version": __version__,
        "argv": args.argv,
        "task": args.task,
        "degradation": {"kernel": model.kernel.tolist(), "scale": model.scale, "sigma_d": model.sigma_d,
                        "boundary": model.boundary.value,
                        "mask_sha256": sha256(args.mask) if args.mask else None},
        "prior": {"sigma_eta": pcfg.sigma_eta, "sigma_eps": pcfg.sigma_eps, "gamma": pcfg.gamma if rcfg.gamma is None else rcfg.gamma,
                  "noise_samples_per_iter": pcfg.noise_samples_per_iter},
        "restore": {"iterations": rcfg.iterations, "step_size": rcfg.step_size, "momentum": rcfg.momentum,
                    "schedule": rcfg.schedule.value, "init": rcfg.init.value,
                    "snapshots": list(rcfg.snapshots)},
        "seed": args.seed,
        "weights": {"path": str(weights), "sha256": sha256(weights)},
        "images": results,
    }
    manifest_path = Path(args.manifest) if args.manifest else (
        outputs[0].with_suffix(".manifest.json") if len(outputs) == 1 else out / "manifest.json")
    write_manifest(manifest_path, manifest)
    for r in results:
        if "psnr" in r:
            print(f"{r['output']}: psnr {r['psnr']:.4f} dB")
    return EXIT_OK


# --- other commands ----------------------------------------------------------------


def cmd_degrade(args):
    args.task = args.kind
    model, _, _ = build_restore_setup(args)
    image = load_image(_require_file(args.input, "input image"))
    save_image(degrade(image, model, seed=args.seed), args.output)
    return EXIT_OK


def cmd_train(args):
    files = _image_inputs(args.inputs)
    images = [load_image(p) for p in files]
    if args.channels == 1:
        images = [im if im.ndim == 2 else im.mean(axis=2) for im in images]
    elif any(im.ndim != 3 or im.shape[2] != args.channels for im in images):
        raise ConfigError(f"all training images must have {args.channels} channels")
    patches = extract_patches(images, args.patch_size, args.patches, seed=args.seed)
    cfg = TrainConfig(sigma_eps=args.sigma_eps, batch_size=args.batch_size, patch_size=args.patch_size,
                      learning_rate=args.lr, epochs=args.epochs, steps_per_epoch=args.steps_per_epoch,
                      seed=args.seed)
    net = dae_train(patches, conv_dae_specs(args.depth, args.width, args.channels), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(net, out)
    write_manifest(
        Path(args.manifest) if args.manifest else out.with_suffix(".manifest.json"),
        {"version": __version__, "argv": args.argv, "seed": args.seed,
         "inputs": {str(p): sha256(p) for p in files},
         "train": {k: getattr(cfg, k) for k in ("sigma_eps", "batch_size", "patch_size", "learning_rate",
                                                "epochs", "steps_per_epoch")},
         "architecture": {"depth": args.depth, "width": args.width, "channels": args.channels},
         "patches": args.patches, "history": net.history,
         "weights": {"path": str(out), "sha256": sha256(out)}},
    )
    print(f"final training loss {net.history[-1]:.4f}")
    return EXIT_OK


def cmd_lab(args):
    cfg = Fig2Config(density=args.density, seed=args.seed, sigma_eta=args.sigma_eta, learner=args.learner,
                     epochs=args.epochs, steps_per_epoch=args.steps_per_epoch, n_samples=args.samples)
    out = Path(args.out)
    res = run_fig2(cfg, out)
    write_manifest(out / "manifest.json", {
        "version": __version__, "argv": args.argv, "config": {**cfg.__dict__, "learner": cfg.learner.value,
                                                             "hidden": list(cfg.hidden)},
        "outputs": {p.name: sha256(p) for p in res.files},
    })
    for key, value in sorted(res.summary.items()):
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_psnr(args):
    a = load_image(_require_file(args.a, "image"))
    b = load_image(_require_file(args.b, "image"))
    print(repr(psnr(a, b, crop=args.crop, peak=args.peak)))
    return EXIT_OK


def cmd_replay(args):
    manifest = json.loads(_require_file(args.manifest_file, "manifest").read_text())
    if "argv" not in manifest:
        raise ConfigError("manifest has no recorded command line")
    return main(manifest["argv"])


# --- parser -----------------------------------------------------------------------


def _restore_options(p):
    p.add_argument("--kernel", help="blur kernel: text array or grayscale image")
    p.add_argument("--sigma-d", type=float, help="observation noise std in [0, 255] units")
    p.add_argument("--scale", type=int, help="downsampling factor (sr)")
    p.add_argument("--mask", help="mask image, nonzero = observed (inpaint)")
    p.add_argument("--boundary", default="circular", choices=("circular", "symmetric"))
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="daeprior", description="Image restoration with a denoising-autoencoder prior.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("restore", help="restore degraded images")
    p.add_argument("task", choices=tuple(TASK_PRESETS))
    p.add_argument("inputs", nargs="+", help="degraded images or directories of images")
    p.add_argument("-o", "--output", required=True, help="output image (one input) or directory")
    p.add_argument("--config", help="flat key = value option file")
    p.add_argument("--weights", help=f"DAEW1 weights (default: ${WEIGHTS_ENV} or the bundled net)")
    _restore_options(p)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--gamma", type=float, help="prior weight (default 6.875 / sigma_eta^2)")
    p.add_argument("--sigma-eta", type=float)
    p.add_argument("--sigma-eps", type=float, help="must equal sigma_eta / sqrt(2)")
    p.add_argument("--samples", type=int, default=1, help="noise draws per iteration")
    p.add_argument("--schedule", choices=[s.value for s in Schedule])
    p.add_argument("--init", choices=[m.value for m in InitMode])
    p.add_argument("--ground-truth", help="clean image for per-iteration PSNR")
    p.add_argument("--trace", help="trace CSV path (single input)")
    p.add_argument("--snapshots", help="iterations to save, e.g. 10,30,100")
    p.add_argument("--manifest", help="manifest JSON path")
    p.add_argument("--jobs", type=int, default=1, help="images restored in parallel")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("degrade", help="simulate an observation")
    p.add_argument("kind", choices=tuple(TASK_PRESETS))
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config", help="flat key = value option file")
    _restore_options(p)
    p.set_defaults(func=cmd_degrade, sigma_eta=None, sigma_eps=None, gamma=None, samples=1,
                   iterations=1, step_size=0.1, momentum=0.9, schedule=None, init=None, snapshots=None)

    p = sub.add_parser("train", help="train a convolutional denoiser")
    p.add_argument("inputs", nargs="+", help="training images or directories")
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--config", help="flat key = value option file")
    p.add_argument("--sigma-eps", type=float, default=25.0)
    p.add_argument("--depth", type=int, default=7)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--patches", type=int, default=50000)
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="manifest JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("lab", help="2D density experiments")
    p.add_argument("experiment", choices=("fig2",))
    p.add_argument("--density", default="gmm", choices=("gmm", "spiral", "gaussian"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="fig2_out")
    p.add_argument("--config", help="flat key = value option file")
    p.add_argument("--sigma-eta", type=float)
    p.add_argument("--learner", default="mlp", choices=("mlp", "oracle"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--steps-per-epoch", type=int, default=1000)
    p.add_argument("--samples", type=int, help="training sample count")
    p.set_defaults(func=cmd_lab)

    p = sub.add_parser("psnr", help="PSNR between two images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--crop", type=int, default=0)
    p.add_argument("--peak", type=float, default=255.0)
    p.set_defaults(func=cmd_psnr)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest_file")
    p.set_defaults(func=cmd_replay)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    config = getattr(args, "config", None)
    if config:
        values = read_config(config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key, raw in values.items():
            action = known.get(key)
            if action is None or key in ("config", "help"):
                raise ConfigError(f"{config}: unknown option {key!r}")
            try:
                value = action.type(raw) if action.type else raw
            except ValueError as err:
                raise ConfigError(f"{config}: bad value for {key}: {raw!r}") from err
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"{config}: {key} must be one of {list(action.choices)}")
            sub.set_defaults(**{key: value})
        args = parser.parse_args(argv)
    args.argv = list(argv)
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except ConfigError as err:
        print(f"daeprior: error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (RestorationDivergedError, TrainingDivergedError, NonFiniteError, FloatingPointError) as err:
        print(f"daeprior: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as err:
        print(f"daeprior: error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
