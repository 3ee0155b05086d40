"""Exception types shared across the package."""


class KatolabError(Exception):
    """Base class for all package errors."""


class GridError(KatolabError, ValueError):
    pass


class EllipticityError(KatolabError, ValueError):
    pass


class WeightError(KatolabError):
    """Raised when the adjoint weight cannot be extracted (degenerate or non-positive)."""


class SquareRootError(KatolabError):
    pass


class FitError(KatolabError, ValueError):
    pass


class ConfigError(KatolabError, ValueError):
    pass


class QuadratureWarning(UserWarning):
    """Doubling the quadrature node count moved the result by more than the tolerance."""
