"""Exception hierarchy shared across the package."""


class M3ImputeError(Exception):
    """Base class for all package errors."""


class DimensionError(M3ImputeError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(M3ImputeError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class ContractError(M3ImputeError, RuntimeError):
    """An operation was invoked in a state that violates its preconditions."""


class SchemaError(M3ImputeError, ValueError):
    """A table does not conform to its declared schema."""


class CalibrationError(M3ImputeError, RuntimeError):
    """A mask generator could not reach the requested missing rate."""


class ConfigurationError(M3ImputeError, ValueError):
    """An experiment or model configuration is invalid."""


class TrainingError(M3ImputeError, RuntimeError):
    """Training diverged or produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class TableFormatError(M3ImputeError, OSError):
    """A data file could not be parsed into rows of the expected width."""


class NumericalError(M3ImputeError, ArithmeticError):
    """A linear system could not be solved reliably."""
