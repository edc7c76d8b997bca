"""Exception hierarchy shared by the app and agent packages."""
from typing import Optional


class DeliberationError(Exception):
    """Base class for every error raised by this project."""


class ConfigError(DeliberationError):
    """Invalid configuration file, condition or command-line input."""


class SimplexViolation(DeliberationError, ValueError):
    """Preference triple is negative or too far from the unit simplex."""


class ProtocolError(DeliberationError):
    """Protocol precondition violated (unknown role, bad session state)."""


class ScriptExhausted(DeliberationError):
    """A scripted backend was asked for a round its script does not cover."""


class BackendError(DeliberationError):
    """An agent backend could not produce a reply.

    Args:
        message: Human readable description
        cause: One of timeout, rate_limit, server_error, transport, unresolved
        attempts: Number of attempts made before giving up
    """

    def __init__(self, message: str, cause: str = "transport", attempts: Optional[int] = None):
        super().__init__(message)
        self.cause = cause
        self.attempts = attempts


class StoreError(DeliberationError):
    """Run file could not be read, written or validated."""


class AnalysisError(DeliberationError):
    """Analysis inputs violate a precondition."""


class DegenerateEnsemble(AnalysisError):
    """Divergence is zero over (most of) the fit window; no slope exists."""
