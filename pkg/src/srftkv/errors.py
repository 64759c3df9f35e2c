"""Exception types raised across the package."""


class SrftkvError(Exception):
    """Base class for all package errors."""


class DimensionError(SrftkvError, ValueError):
    """Vector dimension is not a supported power of two."""


class RangeError(SrftkvError, ValueError):
    """A value lies outside its permitted range."""


class ShapeError(SrftkvError, ValueError):
    """Array shapes do not match the declared layout."""


class ConfigError(SrftkvError, ValueError):
    """Inconsistent or incomplete configuration."""


class DataError(SrftkvError, ValueError):
    """Input data is non-finite or otherwise unusable."""


class UndefinedMomentError(DataError):
    """A statistic is undefined for the given data (e.g. zero variance)."""


class DegenerateReflectorError(SrftkvError, ValueError):
    """A Householder reflector vector has zero norm."""


class DivergenceError(SrftkvError, RuntimeError):
    """Calibration diverged; ``history`` holds the per-step losses."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class FormatError(SrftkvError, ValueError):
    """A binary payload has the wrong magic, version or length."""
