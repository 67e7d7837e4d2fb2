"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A config value or combination of values is invalid."""


class StateError(RuntimeError):
    """An object was used in a state that violates its contract."""


class ParseError(ValueError):
    """A serialized document could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(ParseError):
    """A serialized document has an unsupported format version."""
