class BiregionError(Exception):
    """Base class for errors raised by this package."""

    kind = "error"


class ConfigError(BiregionError, ValueError):
    kind = "config"


class FormatError(BiregionError, ValueError):
    kind = "format"


class ShapeError(BiregionError, ValueError):
    kind = "shape"


class CheckpointError(BiregionError, ValueError):
    kind = "checkpoint"
