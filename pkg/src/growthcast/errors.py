"""Exception hierarchy.

Each family maps onto one CLI exit code (see ``growthcast.cli``).
"""


class GrowthcastError(Exception):
    exit_code = 1


class ConfigError(GrowthcastError, ValueError):
    exit_code = 2


class DataError(GrowthcastError):
    exit_code = 3


class ManifestParseError(DataError, ValueError):
    """Schema violation in a records CSV or pairs JSON-lines file."""


class ManifestValidationError(DataError, ValueError):
    """A record or pair violates a domain invariant."""


class ImageFormatError(DataError, ValueError):
    pass


class ShapeError(DataError, ValueError):
    pass


class NumericError(GrowthcastError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass


class BackendError(GrowthcastError):
    exit_code = 5


class EmbeddingLoadError(BackendError):
    pass
