"""Exception types shared across the package."""


class BevLabError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(BevLabError):
    """Invalid configuration (bad schema, inconsistent values, impossible world)."""


class ModeError(BevLabError):
    """An operation was requested that the model's training mode does not support."""


class TrainingError(BevLabError):
    """Training aborted (e.g. a loss component became non-finite)."""
