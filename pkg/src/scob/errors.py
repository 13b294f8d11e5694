"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: ConfigError/InputError -> 2,
NumericError -> 3, plain OSError -> 1.
"""


class ScobError(Exception):
    """Base class for all package errors."""


class ConfigError(ScobError):
    """A configuration value violates an invariant (bad range, missing fonts, ...)."""


class InputError(ScobError):
    """A runtime input violates an operation precondition."""


class NumericError(ScobError):
    """Training produced a non-finite value; carries diagnostic context."""

    def __init__(self, message, batch_seeds=None):
        super().__init__(message)
        self.batch_seeds = list(batch_seeds) if batch_seeds else []
