"""Exception hierarchy shared by every module."""


class DeltaUQError(Exception):
    """Base class for all library errors."""


class ShapeError(DeltaUQError, ValueError):
    """Input array has the wrong shape for the model."""


class NumericError(DeltaUQError, ArithmeticError):
    """Non-finite values or a matrix that cannot be factorized."""


class DomainError(DeltaUQError, ValueError):
    """Argument outside its admissible range."""


class ConfigError(DeltaUQError, ValueError):
    """Inconsistent configuration (layer chain, parameter subset, ...)."""


class TrainingError(NumericError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ParseError(DeltaUQError, ValueError):
    """Malformed IDX file or artifact."""
