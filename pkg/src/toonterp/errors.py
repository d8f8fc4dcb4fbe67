"""Exception types shared across the package."""


class ToonError(Exception):
    """Base class for all package errors."""


class ParameterError(ToonError, ValueError):
    """An argument is outside its valid range."""


class ContractError(ToonError, ValueError):
    """Inputs violate a shape or usage contract between components."""


class ConfigError(ToonError, ValueError):
    """A configuration file or override is invalid or incomplete."""


class NumericalError(ToonError, RuntimeError):
    """Training or sampling produced a non-finite value."""


class FreezeViolation(ToonError, RuntimeError):
    """A parameter that should be frozen changed during training."""
