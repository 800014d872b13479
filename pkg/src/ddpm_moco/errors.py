"""Exception hierarchy shared by every module."""


class DdpmMocoError(Exception):
    """Base class for all package errors."""


class ParameterError(DdpmMocoError, ValueError):
    """An argument is outside its permitted range."""


class ShapeError(DdpmMocoError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericError(DdpmMocoError, ArithmeticError):
    """A computation produced NaN/Inf or violated a numeric tolerance."""


class ContractError(DdpmMocoError, ValueError):
    """Inputs violate a documented precondition (normalization, name sets, ...)."""


class StateError(DdpmMocoError, RuntimeError):
    """An object is not in the state required by the operation."""


class UndefinedMetricError(DdpmMocoError, ValueError):
    """A metric is mathematically undefined for the given inputs."""


class FormatError(DdpmMocoError, ValueError):
    """A file does not follow its binary or text format."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(DdpmMocoError, ValueError):
    """A run configuration file or value is invalid."""
