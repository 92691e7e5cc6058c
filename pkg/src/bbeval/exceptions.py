"""Exception types shared across the package."""


class BBEvalError(Exception):
    """Base class for all package errors."""


class DimensionError(BBEvalError):
    """Tensor or layer shapes are inconsistent."""


class ParameterError(BBEvalError):
    """A numeric argument is out of its valid range."""


class UsageError(BBEvalError):
    """An API was called in an unsupported way."""


class NumericError(BBEvalError):
    """A forward computation produced NaN or Inf from finite inputs."""


class FormatError(BBEvalError):
    """A binary dataset file is malformed.

    Carries the byte offset of the offending region so loaders can point at
    the exact spot in the file.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(BBEvalError):
    """An experiment configuration is invalid."""


class HarnessError(BBEvalError):
    """The black-box pipeline cannot make progress."""


class StatisticsError(BBEvalError):
    """Not enough data to fit detector statistics."""


class CodebookError(BBEvalError):
    """No codebook satisfying the requested distance was found."""
