"""Exception hierarchy shared by the library and the CLI."""


class InvRegError(Exception):
    """Base class for all library errors."""


class DataError(InvRegError, ValueError):
    """Malformed input data (CSV content, shapes, environment bookkeeping)."""


class ConfigError(InvRegError, ValueError):
    """Invalid experiment configuration."""


class NumericalError(InvRegError, ArithmeticError):
    """A numerical procedure could not produce a trustworthy result."""


class SingularSystemError(NumericalError):
    """The regularized normal equations are (numerically) singular."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ConvergenceError(NumericalError):
    """An iterative solver did not reach its tolerance."""
