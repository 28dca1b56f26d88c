"""Exception types shared across the package."""


class CacError(Exception):
    """Base class for every error raised by cellcac."""


class DegenerateModelError(CacError):
    pass


class InfeasibleActionError(CacError):
    pass


class ConvergenceError(CacError):
    """An iterative procedure ran out of iterations.

    ``residual`` holds the last stopping statistic and ``trace`` whatever
    history the caller collected (may be empty).
    """

    def __init__(self, message, residual=None, trace=None):
        super().__init__(message)
        self.residual = residual
        self.trace = trace if trace is not None else []


class RecurrenceError(CacError):
    """The chain does not have exactly one recurrent class."""


class InvariantViolation(CacError):
    pass


class ConfigError(CacError):
    def __init__(self, message, field=None, line=None):
        super().__init__(message)
        self.field = field
        self.line = line
