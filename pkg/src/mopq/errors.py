"""Exception types shared across the package."""


class MopqError(Exception):
    """Base class for all package errors."""


class UsageError(MopqError):
    """The caller violated an API or CLI contract (bad argument, bad call order)."""


class ConfigError(UsageError):
    """A run configuration file or config value is invalid."""


class ShapeError(MopqError):
    """Operands with incompatible shapes were combined in the graph."""


class NumericError(MopqError):
    """A non-finite value appeared where finite values are required."""


class TrainingDiverged(NumericError):
    """The training loss became non-finite."""


class DegenerateInputError(MopqError):
    """Input is degenerate for the requested operation (zero norm, zero radius)."""


class DataFormatError(MopqError):
    """A serialized artifact violates its binary or text format.

    Carries the byte offset at which the violation was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
