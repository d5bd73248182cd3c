"""Build the bundled 128x128 grayscale fixture images.

Sources are the sample photographs shipped with scikit-image and
scikit-learn.  The training corpus used by ``train_fixture_net.py`` draws
from a disjoint set of source images, so the fixtures are never seen
during training.

Run from the repository root::

    python demos/build_fixtures.py
"""

from pathlib import Path

import numpy as np
import skimage.data
from PIL import Image
from sklearn.datasets import load_sample_image

from daeprior.imageio import save_image

OUT = Path(__file__).resolve().parents[1] / "src" / "daeprior" / "data" / "fixtures"

# name -> (loader, top, left, side); each square crop is resized to 128x128
CROPS = {
    "astronaut": ("astronaut", 20, 150, 200),
    "camera": ("camera", 40, 150, 256),
    "chelsea": ("chelsea", 20, 120, 256),
    "coffee": ("coffee", 40, 150, 320),
    "rocket": ("rocket", 60, 170, 300),
    "coins": ("coins", 0, 64, 256),
    "moon": ("moon", 128, 128, 256),
    "page": ("page", 0, 0, 191),
    "china": ("china", 40, 200, 320),
    "motorcycle": ("stereo_motorcycle", 120, 200, 300),
}

#: Fixtures whose subject is a face; the inpainting check uses these.
PORTRAITS = ("astronaut", "camera", "chelsea")


def gray(img):
    img = img[0] if isinstance(img, tuple) else img
    pil = Image.fromarray(img)
    return pil.convert("L") if pil.mode != "L" else pil


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (loader, top, left, side) in CROPS.items():
        if loader == "china":
            img = gray(load_sample_image("china.jpg"))
        else:
            img = gray(getattr(skimage.data, loader)())
        crop = img.crop((left, top, left + side, top + side)).resize((128, 128), Image.LANCZOS)
        save_image(np.asarray(crop, dtype=np.float64), OUT / f"{name}.png")
        print(f"wrote {name}.png")


if __name__ == "__main__":
    main()
