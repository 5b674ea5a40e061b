"""Shared exception types."""


class HomlabError(Exception):
    """Base class for errors raised by this package."""


class ConvergenceError(HomlabError):
    """An iterative solve stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ZeroModeError(HomlabError):
    """A massless solve was asked to invert the zero mode of the torus."""


class CapacityError(HomlabError):
    """A request would enumerate or materialize more state than the guard allows."""


class ConfigError(HomlabError):
    """A config file, spec field or argument is malformed or inconsistent."""
