"""Bundled test images and the fixture denoiser.

Ten 128x128 grayscale images (``data/fixtures``) and a 7-layer, 32-channel
denoiser trained at ``sigma_eps = 25`` on a disjoint image set
(``data/fixture_dae.daew``).  ``demos/build_fixtures.py`` and
``demos/train_fixture_net.py`` regenerate them.
"""

from importlib import resources
from pathlib import Path

from .imageio import load_image
from .nn import load_weights

__all__ = ["FIXTURE_NAMES", "PORTRAITS", "fixture_path", "load_fixture", "fixture_weights_path", "load_fixture_net"]

FIXTURE_NAMES = ("astronaut", "camera", "chelsea", "china", "coffee", "coins", "moon", "motorcycle", "page", "rocket")

#: Face close-ups among the fixtures.
PORTRAITS = ("astronaut", "camera", "chelsea")


def _data_dir():
    return Path(resources.files("daeprior")) / "data"


def fixture_path(name):
    if name not in FIXTURE_NAMES:
        raise ValueError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURE_NAMES)}")
    return _data_dir() / "fixtures" / f"{name}.png"


def load_fixture(name):
    """Fixture image as a float64 ``128 x 128`` array in [0, 255]."""
    return load_image(fixture_path(name))


def fixture_weights_path():
    return _data_dir() / "fixture_dae.daew"


def load_fixture_net():
    return load_weights(fixture_weights_path())
