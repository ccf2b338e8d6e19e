"""Exception types shared across the package."""
from .autodiff import DomainError, NonFiniteError


class ConfigError(ValueError):
    """Invalid configuration or argument combination."""


class InvertedElementError(DomainError):
    """det(F) fell to or below the inversion threshold.

    ``index`` is the flat row where it happened; callers that know the
    collocation layout fill in ``point`` and ``eta``.
    """

    def __init__(self, J, index=None, point=None, eta=None):
        self.J = float(J)
        self.index = index
        self.point = point
        self.eta = eta
        where = ""
        if point is not None:
            where = f" at X={tuple(float(x) for x in point)}"
        if eta is not None:
            where += f" for eta={tuple(float(x) for x in eta)}"
        super().__init__(f"inverted element: J={self.J:.6g}{where}", value=self.J)


class LineSearchError(RuntimeError):
    """No step length satisfying the strong Wolfe conditions was found."""


class NonConvergenceError(RuntimeError):
    """An iterative oracle solver did not converge."""


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture does not match the requested one."""


__all__ = [
    "ArchitectureMismatchError",
    "CheckpointError",
    "ConfigError",
    "DomainError",
    "InvertedElementError",
    "LineSearchError",
    "NonConvergenceError",
    "NonFiniteError",
]
