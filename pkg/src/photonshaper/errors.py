"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2,
InvariantViolationError -> 3, ConvergenceError -> 4.
"""


class PhotonShaperError(Exception):
    """Base class for all package-specific errors."""


class FluxDomainError(PhotonShaperError, ValueError):
    """Flux excursion where the junction energy is non-positive."""


class ConfigError(PhotonShaperError, ValueError):
    """Invalid, unknown, or missing configuration content."""


class InvariantViolationError(PhotonShaperError, RuntimeError):
    """A numerical invariant (trace, Hermiticity, positivity) drifted
    beyond tolerance during integration."""


class BracketError(PhotonShaperError, RuntimeError):
    """A 1-D search could not establish a valid bracket (non-unimodal
    objective or missing sign change)."""


class ConvergenceError(PhotonShaperError, RuntimeError):
    """An iterative estimator failed to converge."""


class DegenerateInputError(PhotonShaperError, ValueError):
    """Input data is degenerate for the requested operation (e.g. too few
    distinct samples, collinear voltages, rank-deficient design)."""
