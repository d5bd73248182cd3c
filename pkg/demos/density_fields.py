"""Learned versus two-kernel mean-shift fields on 2-D toy densities.

Trains the small denoising MLPs on a Gaussian mixture and on a spiral,
then writes the sample cloud, the three vector fields, the comparison
report and an SVG overview for each density.

Run from the repository root::

    python demos/density_fields.py --out demo_out/fields
"""

import argparse
import json
from pathlib import Path

from daeprior.density import Fig2Config, run_fig2


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo_out/fields")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    for density in ("gmm", "spiral"):
        res = run_fig2(Fig2Config(density=density, seed=args.seed), Path(args.out) / density)
        print(density, json.dumps(res.summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
