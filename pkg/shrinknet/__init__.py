"""Deep residual shrinkage networks for multichannel sEMG gesture classification."""

import sys

from shrinknet.options import DEFAULT_OPTIONS, ShrinkageMode, TrainOptions
from shrinknet.util import (
    ConfigurationError,
    ContractError,
    DataError,
    DivergenceError,
    ShrinkNetError,
    debug,
)

__version__ = "0.1.0"  # Do not forget to update in setup.py!
__author__ = "shrinknet contributors"
__license__ = "MIT"
__status__ = "Alpha"


def env_info() -> str:
    import numpy

    python_ver = sys.version.split(" ")[0]
    return (
        f"shrinknet v{__version__} on {sys.platform}, Python {python_ver}, "
        f"numpy {numpy.__version__}"
    )


__all__ = [
    "debug",
    "env_info",
    "ConfigurationError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "ShrinkNetError",
    "ShrinkageMode",
    "TrainOptions",
    "DEFAULT_OPTIONS",
]
