"""Exception types shared across the package."""


class FLSNError(Exception):
    pass


class DimensionError(FLSNError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(FLSNError, ValueError):
    """Spatial sizes are illegal for the requested op (odd sizes, empty output, ...)."""


class ContractError(FLSNError, RuntimeError):
    """A caller broke an op's precondition (non-scalar backward, missing grad, ...)."""


class SliceError(FLSNError, IndexError):
    pass


class ConfigError(FLSNError, ValueError):
    pass


class DatasetError(FLSNError):
    pass


class LoadError(FLSNError, OSError):
    """A file is missing or does not parse."""


class NumericError(FLSNError, ArithmeticError):
    """NaN or Inf showed up where finite values are required."""
