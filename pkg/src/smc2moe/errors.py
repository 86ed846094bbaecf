"""Exception types shared across the package."""


class Smc2MoeError(Exception):
    """Base class for all package errors."""


class NumericalSingularityError(Smc2MoeError, ArithmeticError):
    """A covariance factorization failed after every jitter level was tried."""

    def __init__(self, message, jitter_levels=()):
        super().__init__(message)
        self.jitter_levels = tuple(jitter_levels)


class DegenerateWeightsError(Smc2MoeError, ValueError):
    """Weights are all zero (or non-finite) and cannot be normalized."""


class DegenerateDataError(Smc2MoeError, ValueError):
    """Data cannot be normalized (constant outputs or a constant input column)."""


class DataFormatError(Smc2MoeError, ValueError):
    """Malformed input file."""


class ConfigError(Smc2MoeError, ValueError):
    """Invalid run configuration."""
