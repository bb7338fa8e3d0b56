"""Exception types shared across the package."""


class ManeuverError(Exception):
    """Base class for all package errors."""


class DimensionError(ManeuverError):
    """Operand shapes do not agree. The message carries both shapes."""


class ConfigError(ManeuverError):
    """A configuration value is out of range or inconsistent."""


class NonFiniteError(ManeuverError):
    """A NaN or Inf appeared where all values must stay finite."""


class DataError(ManeuverError):
    """A dataset, manifest, or file is malformed or unusable."""


class MissingPrerequisiteError(ManeuverError):
    """A required artifact (checkpoint, directory) is absent."""
