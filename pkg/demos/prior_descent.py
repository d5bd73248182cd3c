"""Descend the prior energy alone, starting from a noisy fixture.

With no data term the iterate drifts toward images the denoiser finds
likely.  Snapshots are written every ten iterations and the energy of
each iterate (one frozen noise draw) is printed.

Run from the repository root::

    python demos/prior_descent.py --out demo_out/descent camera
"""

import argparse
from pathlib import Path

import numpy as np

from daeprior.fixtures import FIXTURE_NAMES, load_fixture, load_fixture_net
from daeprior.imageio import save_image
from daeprior.metrics import psnr
from daeprior.prior import PriorConfig
from daeprior.restore import prior_descent


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("name", nargs="?", default="camera", choices=FIXTURE_NAMES)
    parser.add_argument("--out", default="demo_out/descent")
    parser.add_argument("--iterations", type=int, default=50)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = load_fixture_net()
    clean = load_fixture(args.name)[:, :, None]
    x = clean + 25 * np.random.default_rng(0).standard_normal(clean.shape)
    save_image(x, out / "iter000.png")
    for start in range(0, args.iterations, 10):
        x, energies = prior_descent(net, x, PriorConfig(), iterations=10, seed=0)
        save_image(x, out / f"iter{start + 10:03d}.png")
        print(f"iter {start + 10:3d}  energy {energies[-1]:12.1f}  PSNR {psnr(x, clean):.2f} dB")


if __name__ == "__main__":
    main()
