"""Exception hierarchy.

The three top-level families map onto CLI exit codes: ``ConfigError`` -> 1,
``DRNetError`` (runtime) -> 2, ``DataError`` -> 3.
"""


class DRNetError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DRNetError):
    pass


class DataError(DRNetError):
    pass


class DimensionError(DRNetError, ValueError):
    pass


class UnsupportedOpError(DRNetError):
    pass


class StaleTapeError(DRNetError):
    pass


class NumericInstabilityError(DRNetError, ArithmeticError):
    pass


class BranchConstructionError(ConfigError):
    pass


class RoutingShapeError(DimensionError):
    pass


class RoutingError(DRNetError):
    pass


class DomainError(DRNetError, ValueError):
    pass


class ShapeInferenceError(DRNetError):
    pass


class DivergenceError(DRNetError):
    """Raised when a training loss turns non-finite; carries a snapshot path."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class StatisticsError(DRNetError):
    pass


class CheckpointError(DRNetError):
    pass


class CorruptionError(CheckpointError):
    pass


class IncompatibilityError(CheckpointError):
    def __init__(self, fields):
        self.fields = list(fields)
        super().__init__("checkpoint incompatible with target network; differing fields: "
                         + ", ".join(self.fields))


class DataFormatError(DataError):
    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class CorruptRecordError(DataError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
