"""Exception hierarchy shared across the package."""


class StrokeGraphError(Exception):
    """Base class for all package errors."""


class FormatError(StrokeGraphError):
    """A file or record does not follow its declared format."""


class ConsistencyError(StrokeGraphError):
    """Headers and payloads disagree (counts, sizes)."""


class EmptySketchError(StrokeGraphError):
    """No foreground or no surviving stroke in a sketch."""


class ConfigError(StrokeGraphError):
    """Configuration values are missing, unknown or mutually incompatible."""


class ShapeError(StrokeGraphError, ValueError):
    """Operand shapes are incompatible for an array operation."""


class NumericError(StrokeGraphError, FloatingPointError):
    """A forward value became NaN or infinite."""


class UsageError(StrokeGraphError):
    """An API was called in a state where it is not meaningful."""


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


class VersionError(FormatError):
    """File version is not supported by this build."""
