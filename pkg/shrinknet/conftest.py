from sys import argv

import pytest

from shrinknet.data import write_synthetic_dataset
from shrinknet.tensor import set_check_finite
from shrinknet.util import set_debug


def pytest_configure(config):
    if "-v" in argv or "-vv" in argv:
        set_debug(True)
    set_check_finite(True)


@pytest.fixture()
def synthetic_root(tmp_path):
    """A small on-disk dataset: 3 subjects x 8 gestures of 2000 timesteps."""
    root = tmp_path / "myo"
    write_synthetic_dataset(str(root), subjects=3, timesteps=2000, seed=5)
    return root
