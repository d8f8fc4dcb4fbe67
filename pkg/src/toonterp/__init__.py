"""Diffusion-based cartoon frame interpolation with reference-injecting decoding and sketch guidance."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, FreezeViolation, NumericalError, ParameterError, ToonError

__all__ = ["ConfigError", "ContractError", "FreezeViolation", "NumericalError", "ParameterError", "ToonError",
           "__version__"]
