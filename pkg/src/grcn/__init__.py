"""Two-stage object detection with separated classification/localization branches
and global-context attention, on a small numpy autograd engine."""

from .errors import (ConfigurationError, DimensionError, GeometryError, GRCNError, NumericError,
                     StateError)
from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "GRCNError", "DimensionError", "ConfigurationError",
           "GeometryError", "NumericError", "StateError"]
__version__ = "0.1.0"
