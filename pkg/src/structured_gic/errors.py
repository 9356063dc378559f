"""Exception types shared across the package."""


class StructuredGicError(Exception):
    """Base class for all errors raised by this package."""


class InvalidShape(StructuredGicError, ValueError):
    """A parameter point does not match the shape expected by a norm, loss or subspace."""


class NotConverged(StructuredGicError, RuntimeError):
    """An iterative solver stopped at ``max_iter`` without meeting its tolerance.

    The best iterate and the final residual are attached so callers can
    still inspect (or deliberately use) the partial result.
    """

    def __init__(self, message, theta=None, residual=float("nan")):
        super().__init__(message)
        self.theta = theta
        self.residual = residual


class SingularFitWarning(UserWarning):
    """The restricted normal system was rank deficient; a minimum-norm solution was used."""


class PsiBudgetExceeded(StructuredGicError, ValueError):
    """A model subspace is larger than the compatibility budget allows."""


class DegenerateData(StructuredGicError, ValueError):
    """The data admit no meaningful regularization path (zero gradient at the origin)."""


class ConfigError(StructuredGicError, ValueError):
    """Invalid run configuration (bad key, bad value, missing flag)."""
