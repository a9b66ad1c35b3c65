"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the classes below rather than raising bare ValueErrors.
"""


class RedNetError(Exception):
    """Base class for all package errors."""


class ShapeError(RedNetError, ValueError):
    """Tensor shape or dtype contract violation."""


class ConfigError(RedNetError, ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(RedNetError, ValueError):
    """Dataset, file-format, or checkpoint parse failure."""


class NumericError(RedNetError, ArithmeticError):
    """Non-finite value encountered where finiteness is required."""
