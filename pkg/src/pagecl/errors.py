"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see ``pagecl.cli``).
"""


class PageError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PageError, ValueError):
    exit_code = 1


class DataError(PageError, ValueError):
    exit_code = 2


class ShapeError(DataError):
    """Array dimensions do not agree with the model or with each other."""


class InsufficientDataError(DataError):
    pass


class CheckpointError(DataError):
    """Corrupt, truncated or incompatible checkpoint / calibration artifact."""


class NumericError(PageError, ArithmeticError):
    exit_code = 3
