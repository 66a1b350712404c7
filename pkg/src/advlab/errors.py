"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data or arguments that violate a documented contract."""


class DimensionError(ValidationError):
    """Array shapes that do not compose."""


class ConfigError(ValidationError):
    """Invalid experiment configuration."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""
