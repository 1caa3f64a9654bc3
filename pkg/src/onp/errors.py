"""Exception types raised across the package."""


class OnpError(Exception):
    """Base class for all package errors."""


class ParseError(OnpError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ModelError(OnpError, ValueError):
    """Input violates a structural assumption of the network model."""


class DimensionError(OnpError, ValueError):
    pass


class DomainError(OnpError, ValueError):
    pass


class CapabilityError(OnpError, RuntimeError):
    """Instance too large for a dense-only code path."""
