"""Exception types shared across the package."""


class CompdetError(Exception):
    """Base class for all package errors."""


class InputError(CompdetError):
    """Invalid values in an input (non-finite pixels, non-unit vectors, ...)."""


class DimensionError(CompdetError):
    """Shape or size mismatch between arguments."""


class FormatError(CompdetError):
    """Corrupt or unrecognized serialized data; message names the failing field."""


class CardinalityError(CompdetError):
    """Too few samples for the requested operation."""


class GeometryError(CompdetError):
    """Invalid or degenerate geometry (boxes, feasible regions, placements)."""


class ConfigurationError(CompdetError):
    """Missing or inconsistent configuration (models, corner roles, flags)."""


class DataError(CompdetError):
    """Dataset / annotation / detection-record inconsistency."""


class NumericError(CompdetError):
    """Non-finite values encountered during a numeric computation."""


class GenerationError(CompdetError):
    """Synthetic scene generation could not satisfy the requested constraints."""
