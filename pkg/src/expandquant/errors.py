"""Exception types shared across the package."""


class ExpandQuantError(Exception):
    """Base class for all package-specific errors."""


class UnsupportedOrderError(ExpandQuantError):
    """No factorization of the requested Hadamard order exists."""


class CholeskyFailureError(ExpandQuantError):
    """Hessian not positive definite even after damping."""


class RankDeficientError(ExpandQuantError):
    """Input matrix violates a full-rank precondition."""


class BoundViolationError(ExpandQuantError):
    """A numerically verified inequality failed to hold."""
