"""Exception types raised across the package."""


class FrozenSRError(Exception):
    """Base class for all errors raised by frozensr."""


class DimensionError(FrozenSRError, ValueError):
    """An image dimension is incompatible with the requested operation."""


class ShapeError(FrozenSRError, ValueError):
    """Operands disagree in shape or count."""


class SizeError(FrozenSRError, ValueError):
    """An image is too small for the requested window or patch."""


class ParameterError(FrozenSRError, ValueError):
    """A scalar argument is out of its allowed range."""


class ConfigError(FrozenSRError, ValueError):
    """Model, training or run configuration is invalid or inconsistent."""


class DatasetError(FrozenSRError, ValueError):
    """A dataset is empty or violates the paired-data contract."""


class CheckpointError(FrozenSRError):
    """A checkpoint file is corrupt, truncated or of an unknown version."""


class ImageIOError(FrozenSRError, OSError):
    """A raster file could not be read or written."""


class TrainingError(FrozenSRError, RuntimeError):
    """Training diverged or could not proceed."""
