"""Exception hierarchy shared across the package."""


class FMSEError(Exception):
    """Base class for all package errors."""


class InvalidInputError(FMSEError, ValueError):
    """An argument violates a documented precondition."""


class SingularityError(FMSEError, ZeroDivisionError):
    """A quantity diverges at the requested time (e.g. division by ``1 - t`` at ``t = 1``)."""


class DivergenceError(FMSEError, FloatingPointError):
    """Numerical integration or training produced non-finite values."""

    def __init__(self, message, step=None, details=None):
        super().__init__(message)
        self.step = step
        self.details = details or {}


class ConfigError(FMSEError, ValueError):
    """Invalid configuration (unknown key, bad value, missing required entry)."""


class CorpusError(FMSEError):
    """Corpus scanning or loading failed."""


class PerceptualLossError(FMSEError):
    """A perceptual evaluator raised or returned a non-finite value."""
