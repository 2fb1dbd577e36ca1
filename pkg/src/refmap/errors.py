"""Exception types shared across the library."""


class RefmapError(Exception):
    """Base class for library errors."""


class HdrParseError(RefmapError, ValueError):
    """Malformed PFM/RGBE stream. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InsufficientDataError(RefmapError, ValueError):
    """Too few samples for the requested statistic or fit."""


class UnsupportedMaterialError(RefmapError, ValueError):
    """Operation is undefined for the given material parameters."""


class ConfigError(RefmapError, ValueError):
    """Bad configuration file, flag value, or manifest."""
