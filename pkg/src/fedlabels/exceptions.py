"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, shape mismatch or incompatible options."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class UsageError(RuntimeError):
    """An API was called out of order or with unknown identifiers."""


class ParseError(ValueError):
    """Malformed binary input. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
