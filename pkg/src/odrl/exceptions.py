class ODRLError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(ODRLError, ValueError):
    """Invalid or incomplete configuration."""


class DimensionError(ODRLError, ValueError):
    """Array shapes that do not fit together."""


class UsageError(ODRLError, RuntimeError):
    """An operation called in a state where it is not allowed."""


class TrainingError(ODRLError, RuntimeError):
    """Non-finite values or other failures during optimisation."""


class FormatError(ODRLError, ValueError):
    """Malformed file contents."""


class RangeError(ODRLError, IndexError):
    """An index or id outside its allowed range."""
