"""Exception types shared across the package."""


class DTFLError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DTFLError, ValueError):
    """Array dimensions do not line up."""


class InputError(DTFLError, ValueError):
    """An argument value is outside its allowed domain."""


class StateError(DTFLError, RuntimeError):
    """Operation called before its prerequisites, e.g. backward without forward."""


class NumericError(DTFLError, ValueError):
    """Non-finite values appeared where finite ones are required."""


class ProtocolError(DTFLError, RuntimeError):
    """Round structure violated: empty round, misaligned model parts."""


class ConfigError(DTFLError, ValueError):
    """Run configuration is invalid."""


class ParseError(DTFLError, ValueError):
    """A file could not be parsed. Carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
