"""Exception hierarchy shared across the package."""


class GbhError(Exception):
    """Base class for all package errors."""


class ParameterError(GbhError, ValueError):
    """Invalid argument or configuration value."""


class MeshIntegrityError(GbhError, RuntimeError):
    """Mesh violates a structural invariant (e.g. an inverted cell)."""


class AssemblyError(GbhError, RuntimeError):
    """Residual or Jacobian assembly failed."""


class LinearSolverError(GbhError, RuntimeError):
    """Sparse direct solve failed."""


class NewtonNonConvergence(GbhError, RuntimeError):
    """Newton ran out of iterations; carries the residual history."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


class ContractError(GbhError, TypeError):
    """Operation invoked outside its supported contract."""
