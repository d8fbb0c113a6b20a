"""Exception types shared across the package."""


class GeoAlignError(Exception):
    """Base class for package errors."""


class DomainError(GeoAlignError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ShapeError(GeoAlignError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(GeoAlignError, ValueError):
    """Invalid configuration or command usage."""


class DataError(GeoAlignError, ValueError):
    """Malformed, corrupt, or inconsistent data file."""


class NumericError(GeoAlignError, RuntimeError):
    """Non-finite values or a numerically failed run."""
