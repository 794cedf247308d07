"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's precondition."""


class ParseError(ValueError):
    """An annotation line could not be parsed."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NumericFailureError(ArithmeticError):
    """A differentiated objective produced a non-finite value or derivative."""

    def __init__(self, message, index=None):
        if index is not None:
            message = f"parameter {index}: {message}"
        super().__init__(message)
        self.index = index


class GenerationError(RuntimeError):
    """Synthetic scene generation exhausted its retry budget."""
