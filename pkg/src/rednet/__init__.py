"""RGB-D residual encoder-decoder semantic segmentation, from scratch."""

from .errors import ConfigError, DataError, NumericError, RedNetError, ShapeError
from .model import NetworkConfig, PyramidOutputs, RedNet
from .tensor import Shape, Tensor

__all__ = [
    "ConfigError",
    "DataError",
    "NetworkConfig",
    "NumericError",
    "PyramidOutputs",
    "RedNet",
    "RedNetError",
    "Shape",
    "ShapeError",
    "Tensor",
]

__version__ = "0.1.0"
