"""Exception hierarchy shared across the package."""


class AdaptorError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AdaptorError, ValueError):
    pass


class NumericError(AdaptorError, ArithmeticError):
    pass


class GraphStateError(AdaptorError, RuntimeError):
    """Backward called on a graph that was already consumed, or on a non-scalar."""


class ConfigError(AdaptorError, ValueError):
    pass


class FormatError(AdaptorError):
    """Base for structured parse errors on ADPC / ADPK files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class HeaderError(FormatError):
    """Header fields are present but inconsistent or out of range."""


class TrainingAborted(AdaptorError):
    """A non-finite gradient was detected; carries the offending parameter name."""

    def __init__(self, param_name: str, message: str | None = None):
        self.param_name = param_name
        super().__init__(message or f"non-finite gradient in parameter {param_name!r}")
