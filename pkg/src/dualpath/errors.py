"""Exception types raised across the package."""


class DualPathError(Exception):
    """Base class for all package errors."""


class DimensionError(DualPathError, ValueError):
    pass


class LabelIndexError(DualPathError, IndexError):
    pass


class ParameterError(DualPathError, ValueError):
    pass


class NumericError(DualPathError, ArithmeticError):
    pass


class StateError(DualPathError, RuntimeError):
    pass


class UsageError(DualPathError, RuntimeError):
    pass


class BatchSizeError(DualPathError, ValueError):
    pass


class DataError(DualPathError, ValueError):
    pass


class ParseError(DataError):
    """Malformed line in an on-disk file; carries the 1-based line number."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class FormatError(DualPathError, ValueError):
    pass


class ConfigError(DualPathError, ValueError):
    pass


class CapacityError(DualPathError, ValueError):
    pass


class SamplingError(DualPathError, ValueError):
    pass
