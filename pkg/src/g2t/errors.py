"""Exception types shared across the package."""


class G2TError(Exception):
    """Base class for all package errors."""


class DomainError(G2TError, ValueError):
    """An argument lies outside the domain of an operation."""


class AssumptionError(G2TError, ValueError):
    """A convergence bound was requested for an objective that violates its assumptions."""


class UnavailableControlVariate(G2TError):
    """The model cannot supply the requested control variate."""


class IngestionError(G2TError, ValueError):
    """A dataset file or array could not be parsed."""


class ConfigError(G2TError, ValueError):
    """An experiment configuration is invalid."""
