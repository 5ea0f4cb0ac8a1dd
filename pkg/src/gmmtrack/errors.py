class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class NonFiniteError(ArithmeticError):
    """Raised when an energy or gradient evaluates to NaN or infinity."""


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration files."""
