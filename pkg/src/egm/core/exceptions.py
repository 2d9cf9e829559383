"""Error types raised by the sampler toolkit."""


class EGMError(Exception):
    """Base class for all toolkit errors."""


class InvalidStateError(EGMError, ValueError):
    """A state holds values outside its declared domain."""


class SingularityError(EGMError, ValueError):
    """A kernel or generator was evaluated at a singular time."""


class DegenerateWeightsError(EGMError, RuntimeError):
    """Every importance weight of an estimate is zero."""


class UnsupportedTaskError(EGMError, ValueError):
    """The requested operation has no implementation for this task."""


class EnumerationLimitError(EGMError, ValueError):
    """Exhaustive enumeration would exceed the configured cap."""


class ConfigError(EGMError, ValueError):
    """Configuration file could not be parsed or validated."""


class CheckpointError(EGMError, RuntimeError):
    """Checkpoint is missing, truncated or written by another format version."""


class SampleFormatError(EGMError, ValueError):
    """Sample file header does not match its payload or the expected layout."""


class StorageError(EGMError, OSError):
    """A run directory, checkpoint or output file could not be written."""
