"""Exception hierarchy shared across the package."""


class EitError(Exception):
    """Base class for all package errors."""


class ContractError(EitError, ValueError):
    """An argument violated a documented precondition (size/kind mismatch)."""


class NumericalError(EitError, RuntimeError):
    """A numerical procedure failed (singular system, NaN loss, no descent)."""


class GenerationError(EitError, RuntimeError):
    """Random generation exhausted its retry budget."""


class ConfigError(EitError, ValueError):
    """A run configuration failed schema validation."""
