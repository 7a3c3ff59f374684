"""Exception taxonomy shared across the package.

The CLI maps ConfigError (and argparse usage errors) to exit code 2 and any
StageError raised while executing a run to exit code 3.
"""


class UEForgeError(Exception):
    """Base class for all package errors."""


class DimensionError(UEForgeError, ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class InputError(UEForgeError, ValueError):
    """A value-level precondition was violated (bad label, bad count, ...)."""


class UsageError(UEForgeError, RuntimeError):
    """The API was called in an unsupported way."""


class ConfigError(UEForgeError, ValueError):
    """A configuration value is invalid or missing."""


class FormatError(UEForgeError, ValueError):
    """A binary file does not conform to its declared layout."""


class NumericsError(UEForgeError, ArithmeticError):
    """A computation produced non-finite values where finiteness is required."""


class StageError(UEForgeError, RuntimeError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
