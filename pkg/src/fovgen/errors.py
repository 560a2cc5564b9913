"""Exception types shared across the package."""


class FovgenError(Exception):
    """Base class; carries a machine-readable ``code`` for service responses."""

    code = "internal"


class GeometryError(FovgenError):
    """Shape/size mismatch between images, grids, or masks."""

    code = "geometry"


class DomainError(FovgenError):
    """Argument outside its mathematical domain (scale, range, sign)."""

    code = "domain"


class EmptyInputError(FovgenError):
    code = "empty-input"


class CapacityError(FovgenError):
    code = "capacity"


class IngestionError(FovgenError):
    """Malformed or non-finite data in an ingested file."""

    code = "ingestion"


class ConfigError(FovgenError):
    code = "config"


class NumericError(FovgenError):
    """Non-finite values encountered mid-computation."""

    code = "numeric"


class ProtocolError(FovgenError):
    """Trial state machine violation in the experiment service."""

    code = "protocol"
