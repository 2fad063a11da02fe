"""Exception types shared across the package."""


class NormSwitchError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NormSwitchError, ValueError):
    """Invalid shapes, settings or network specifications."""


class InputError(NormSwitchError, ValueError):
    """Invalid user-supplied data (labels, simplexes, datasets)."""


class NumericError(NormSwitchError, ArithmeticError):
    """Non-finite values or degenerate quantities such as a zero-norm filter."""


class UsageError(NormSwitchError, RuntimeError):
    """An API was called out of order, e.g. backward with a stale cache."""


class ParseError(NormSwitchError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
