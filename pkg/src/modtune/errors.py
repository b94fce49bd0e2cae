"""Exception types shared across the package."""


class ModtuneError(Exception):
    """Base class for all package errors."""


class ValidationError(ModtuneError, ValueError):
    """Bad input data, configuration or file contents."""


class ShapeError(ValidationError):
    """Operand dimensions do not agree."""


class ConfigError(ValidationError):
    """Invalid or inconsistent configuration."""


class StateError(ModtuneError, RuntimeError):
    """An object is not in the state an operation requires."""


class NumericalError(ModtuneError, FloatingPointError):
    """Non-finite values or a failed gradient check."""
