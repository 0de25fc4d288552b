"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class IcdEmbedError(Exception):
    """Base class for package errors."""


class DataError(IcdEmbedError, ValueError):
    """Malformed or unusable input data."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(IcdEmbedError, ArithmeticError):
    """A computation produced non-finite values."""
