"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a structural invariant (shape, finiteness, size)."""


class ParseError(ValidationError):
    """A dataset file could not be parsed.

    Carries the 1-based line (or record) number where parsing failed.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
