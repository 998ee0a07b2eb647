"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid or unknown configuration keys/values."""


class DataError(Exception):
    """Corpus or manifest problem. ``items`` lists the offending entries."""

    def __init__(self, message, items=None):
        super().__init__(message)
        self.items = list(items) if items else []


class SignalTooShortError(ValueError):
    """Signal shorter than one analysis window / one metric segment."""


class AllSilentError(ValueError):
    """Every frame of the reference falls below the silence threshold."""


class MetricUnavailableError(RuntimeError):
    """An external metric evaluator is missing, failed, or timed out."""


class CheckpointMismatchError(RuntimeError):
    """Checkpoint architecture does not match the requested configuration."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; message names the offending segment."""
