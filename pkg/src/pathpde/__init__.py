"""Desk-scale numerics for fully nonlinear path-dependent PDEs."""

from .errors import ConfigurationError, DomainError, PathPDEError, PrecisionError

__version__ = "0.1.0"

__all__ = [
    "PathPDEError",
    "DomainError",
    "ConfigurationError",
    "PrecisionError",
    "__version__",
]
