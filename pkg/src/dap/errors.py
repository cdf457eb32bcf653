"""Exception types raised across the package."""


class DapError(Exception):
    """Base class for all package errors."""


class ConfigError(DapError, ValueError):
    pass


class GenerationError(DapError, RuntimeError):
    pass


class DimensionError(DapError, ValueError):
    pass


class LengthError(DapError, ValueError):
    pass


class UndefinedSimilarityError(DapError, ValueError):
    pass


class InstrumentationError(DapError, RuntimeError):
    pass


class BatchSizeError(DapError, ValueError):
    pass


class DegeneratePartitionError(DapError, ValueError):
    pass


class RangeError(DapError, ValueError):
    pass


class NumericalError(DapError, FloatingPointError):
    """Non-finite value; ``component`` names the offending term."""

    def __init__(self, message, component=None):
        super().__init__(message)
        self.component = component


class MaskCoverageError(DapError, ValueError):
    pass


class FormatError(DapError, ValueError):
    pass


class UnknownClassError(DapError, LookupError):
    pass
