"""Exception types raised across the package."""


class RettentionError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RettentionError, ValueError):
    """Tensor dimensions are inconsistent with the operation."""


class NumericError(RettentionError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class ParameterError(RettentionError, ValueError):
    """A scalar parameter is outside its admissible range."""


class InvalidMaskError(RettentionError, ValueError):
    """A mask cannot be used, e.g. it has a row with no included column."""


class CacheMissError(RettentionError, RuntimeError):
    """A sparse step was requested before any cache was captured."""


class ConfigError(RettentionError, ValueError):
    """A run configuration is malformed or self-inconsistent."""


class InvariantError(RettentionError, AssertionError):
    """A self-check detected a violated numerical identity during a run."""
