"""Exception types raised across the package."""


class CurbTrackError(Exception):
    """Base class for all package errors."""


class MalformedFileError(CurbTrackError, ValueError):
    """A binary or text input does not follow its declared layout."""


class ConfigError(CurbTrackError, ValueError):
    """A configuration or calibration file is missing keys or holds invalid values."""


class InsufficientPointsError(CurbTrackError, ValueError):
    """Too few points to run a selection or fit."""


class DegenerateFitError(CurbTrackError, ValueError):
    """The least-squares system is rank deficient."""


class NoFitError(CurbTrackError, ValueError):
    """RANSAC found no model with enough support."""


class UndefinedAngleError(CurbTrackError, ValueError):
    """Polar angle requested for the origin."""


class IngestWarning(UserWarning):
    """Points were dropped while reading or ring-assigning a frame."""
