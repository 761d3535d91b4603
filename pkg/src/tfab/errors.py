"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class FormatError(ValueError):
    """A file on disk does not match the expected binary format."""
