"""Exception taxonomy shared across the package.

Three failure classes are distinguished: domain errors (a mathematical
precondition is violated), configuration errors (the requested computation
is structurally impossible at the given resolution or budget), and
precision errors (an input does not sit on the working grid and snapping
would move it too far).
"""


class PathPDEError(Exception):
    """Base class for package errors."""


class DomainError(PathPDEError, ValueError):
    """A mathematical precondition does not hold (order < 1, knots not
    increasing, anchor/target mismatch, singular evaluation point, ...)."""


class ConfigurationError(PathPDEError, ValueError):
    """The computation cannot be set up as requested: grid mismatch,
    exhaustive tree beyond the node cap, lattice engine asked to handle a
    path-dependent coefficient, invalid config file values."""


class PrecisionError(PathPDEError, ValueError):
    """A time or coordinate is off-grid by more than the snapping
    tolerance."""
