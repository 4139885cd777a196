"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or inconsistent input data or configuration."""


class NumericalError(RuntimeError):
    """A computation produced non-finite or degenerate values."""


class NonConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before meeting tolerance.

    Carries the last iterate and the residual norm at the point of failure so
    callers can inspect or restart.
    """

    def __init__(self, message, last_iterate=None, residual_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm
