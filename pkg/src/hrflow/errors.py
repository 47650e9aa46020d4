"""Exception hierarchy shared by all modules."""


class HRFError(Exception):
    """Base class for errors raised by hrflow."""


class DomainError(HRFError, ValueError):
    """Input outside the domain of an operation (e.g. an indefinite metric)."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class PreconditionError(HRFError):
    """An operation was called on data that violates its stated precondition."""


class ConvergenceError(HRFError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class BlowUpError(HRFError):
    """Time stepping could not keep the metric positive-definite or finite.

    ``trajectory`` holds everything computed up to the last valid state.
    """

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


class ConfigError(HRFError, ValueError):
    """Malformed or inconsistent experiment configuration."""
