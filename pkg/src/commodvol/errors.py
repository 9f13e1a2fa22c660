"""Exception hierarchy.

Each family maps onto one CLI exit code (see ``commodvol.cli``).
"""


class CommodvolError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigurationError(CommodvolError, ValueError):
    """Invalid mesh, weights, bounds or run configuration."""

    exit_code = 2


class DataError(CommodvolError, ValueError):
    """Malformed or inconsistent quote data."""

    exit_code = 3


class DimensionError(DataError):
    """Array shapes or meshes do not line up."""


class DomainError(DataError):
    """A query point falls outside the computational domain."""


class ImpliedVolError(DataError):
    """Price outside the no-arbitrage band; no implied volatility exists.

    ``bound`` names the violated side ("lower" or "upper") and ``value`` its level.
    """

    def __init__(self, message, bound=None, value=None):
        super().__init__(message)
        self.bound = bound
        self.value = value


class ConversionError(DataError):
    """American to European conversion failed for a quote or a maturity."""

    def __init__(self, message, quote=None):
        super().__init__(message)
        self.quote = quote


class NumericalError(CommodvolError, ArithmeticError):
    """A numerical routine failed."""

    exit_code = 4


class SolverInstabilityError(NumericalError):
    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class DescentError(NumericalError):
    """Gradient descent diverged; ``history`` holds the normalized misfits."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
