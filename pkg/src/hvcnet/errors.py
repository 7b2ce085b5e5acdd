"""Exception types shared across the package."""


class HVCError(Exception):
    """Base class for all package errors."""


class DimensionError(HVCError, ValueError):
    """Tensor shapes do not line up for the requested operation."""


class GraphError(HVCError, RuntimeError):
    """Misuse of the recorded computation graph (detached, reused, non-scalar)."""


class ConfigError(HVCError, ValueError):
    """An inconsistent or unknown configuration value."""


class UnsupportedConfigurationError(ConfigError):
    pass


class FormatError(HVCError, ValueError):
    """A binary file does not match its declared layout.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(HVCError, ArithmeticError):
    """Training produced a non-finite value."""
