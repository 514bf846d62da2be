"""Exception hierarchy shared by all modules."""


class HdivError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(HdivError, ValueError):
    """Invalid configuration or argument (CLI exit code 1)."""


class DataError(HdivError, ValueError):
    """Malformed or unusable input data (CLI exit code 2)."""


class RankDeficiencyError(HdivError, ArithmeticError):
    """A least-squares or IV design is (numerically) rank deficient."""

    def __init__(self, message, support_size=None):
        super().__init__(message)
        self.support_size = support_size


class WeakIdentificationError(HdivError, ArithmeticError):
    """The Jacobian of the moment system is singular."""


class EstimationError(HdivError):
    """A named estimation step failed; wraps the underlying cause."""

    def __init__(self, message, step=None, k=None):
        super().__init__(message)
        self.step = step
        self.k = k
