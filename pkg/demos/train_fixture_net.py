"""Train the bundled 7x32 fixture denoiser at sigma_eps = 25.

The corpus is a set of scikit-image / scikit-learn sample images that is
disjoint from the fixture sources (see ``build_fixtures.py``).  Each
image is capped at 512 pixels and used at full and half resolution.  With the defaults the run
takes a bit under 1.5 hours on one CPU core.

Run from the repository root::

    python demos/train_fixture_net.py [--epochs 8] [--steps-per-epoch 1250]
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image
from sklearn.datasets import load_sample_image

from daeprior.nn import TrainConfig, conv_dae_specs, dae_loss, dae_train, extract_patches, save_weights

OUT = Path(__file__).resolve().parents[1] / "src" / "daeprior" / "data" / "fixture_dae.daew"

TRAIN_SOURCES = ("brick", "grass", "gravel", "retina", "hubble_deep_field", "immunohistochemistry",
                 "cell", "text", "colorwheel", "logo")


def to_gray(img):
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    pil = Image.fromarray(img)
    return pil.convert("L")


def corpus():
    images = [to_gray(getattr(skimage.data, n)()) for n in TRAIN_SOURCES]
    images.append(to_gray(load_sample_image("flower.jpg")))
    out = []
    for pil in images:
        if max(pil.size) > 512:  # keep large scans from dominating the area-weighted sampling
            f = 512 / max(pil.size)
            pil = pil.resize((round(pil.width * f), round(pil.height * f)), Image.LANCZOS)
        out.append(np.asarray(pil, dtype=np.float32))
        half = pil.resize((pil.width // 2, pil.height // 2), Image.LANCZOS)
        out.append(np.asarray(half, dtype=np.float32))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--steps-per-epoch", type=int, default=1250)
    ap.add_argument("--patches", type=int, default=60000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    images = corpus()
    patches = extract_patches(images, 32, args.patches + 2000, seed=args.seed)
    train, val = patches[:-2000], patches[-2000:]
    cfg = TrainConfig(sigma_eps=25.0, batch_size=64, patch_size=32, learning_rate=1e-3, epochs=args.epochs,
                      steps_per_epoch=args.steps_per_epoch, seed=args.seed)
    start = time.time()

    def checkpoint(epoch, loss, net):
        snapshot = net.copy().eval()
        val_mse = dae_loss(snapshot, val, seed=1)
        logging.info("epoch %d  train %.2f  val %.2f (identity %.1f)  %.0f s",
                     epoch + 1, loss, val_mse, 625.0, time.time() - start)
        save_weights(snapshot, args.out)

    net = dae_train(train, conv_dae_specs(7, 32, 1), cfg, callback=checkpoint)
    save_weights(net, args.out)
    logging.info("saved %s after %.0f s", args.out, time.time() - start)


if __name__ == "__main__":
    main()
