"""Exception types shared across the package.

Each maps onto one CLI exit code (see ``sparseseg.cli``).
"""


class ConfigError(ValueError):
    """Invalid configuration or invalid arguments to an operation."""


class DataError(ValueError):
    """Malformed, missing or inconsistent data on disk or in memory."""


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite."""
