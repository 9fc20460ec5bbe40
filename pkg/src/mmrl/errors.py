from __future__ import annotations


class MmrlError(Exception):
    """Base class for every error raised by mmrl."""


class ConfigurationError(MmrlError, ValueError):
    """Bad shapes, bad config values, unknown config keys.

    `key` and `line` are set when the error comes from a config file.
    """

    def __init__(self, message: str, *, key: str | None = None, line: int | None = None):
        self.key = key
        self.line = line
        if key is not None and line is not None:
            message = f"line {line}: {message} (key '{key}')"
        elif key is not None:
            message = f"{message} (key '{key}')"
        super().__init__(message)


class UsageError(MmrlError, ValueError):
    pass


class OracleError(MmrlError):
    pass


class AssumptionViolation(MmrlError):
    """Behaviors in one comparison do not share their covariance."""


class DegenerateConfiguration(MmrlError):
    pass


class PerturbationSpecError(UsageError):
    pass


class CheckpointError(MmrlError):
    pass


class TrainingDivergence(MmrlError, RuntimeError):
    pass
