"""Exception types shared across the package.

Each class carries a short ``code`` used by the command line to prefix
single-line error messages.
"""


class GRCNError(Exception):
    code = "E_GENERIC"


class DimensionError(GRCNError, ValueError):
    code = "E_DIMENSION"


class ConfigurationError(GRCNError, ValueError):
    code = "E_CONFIG"


class GeometryError(GRCNError, ValueError):
    code = "E_GEOMETRY"


class NumericError(GRCNError, ArithmeticError):
    code = "E_NUMERIC"


class StateError(GRCNError, RuntimeError):
    code = "E_STATE"
