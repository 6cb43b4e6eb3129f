"""Exception hierarchy. The CLI maps these onto exit codes."""


class DarcyInvError(Exception):
    """Base class for all package errors."""


class ConfigError(DarcyInvError, ValueError):
    """Invalid or inconsistent configuration / arguments (exit code 2)."""


class GridError(ConfigError):
    pass


class ObservationError(ConfigError):
    pass


class DimensionMismatch(DarcyInvError, ValueError):
    pass


class NumericalError(DarcyInvError, RuntimeError):
    """Numerical failure (exit code 3)."""


class MemoryBudgetError(NumericalError):
    pass


class EigenError(NumericalError):
    pass


class NonPositivePermeability(NumericalError, ValueError):
    pass


class SolverDivergence(NumericalError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonConvergence(NumericalError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class FormatError(DarcyInvError, OSError):
    """Malformed artifact file (exit code 4)."""
