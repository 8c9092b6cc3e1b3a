"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when array shapes or indices are incompatible with an operation."""


class DataError(ValueError):
    """Raised when a dataset file or directory cannot be parsed."""


class ConfigError(ValueError):
    """Raised for invalid experiment configuration."""
