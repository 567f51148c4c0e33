class WeedstemError(Exception):
    """Base class for package errors."""


class AnnotationError(WeedstemError):
    """Malformed or inconsistent annotation file."""


class ValidationError(WeedstemError):
    """Domain-type invariant violated."""


class CapacityError(WeedstemError):
    """Scene generator could not place the requested instances."""


class ConfigError(WeedstemError):
    """Invalid or mismatched configuration."""


class EmptyBankError(WeedstemError):
    """Similarity gating requested against an empty weed bank."""


class DataError(WeedstemError):
    """Dataset is empty or insufficient for the requested operation."""


class NumericalError(WeedstemError):
    """Non-finite value encountered where a finite one is required."""
