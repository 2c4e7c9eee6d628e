"""Exception hierarchy shared by all modules.

Each class carries the process exit code the command line maps it to.
"""


class FslfError(Exception):
    exit_code = 1


class ConfigError(FslfError, ValueError):
    """Invalid parameters, missing files or malformed configuration."""

    exit_code = 2


class DataError(FslfError, ValueError):
    """Input data that cannot be processed (degenerate, empty, inconsistent)."""

    exit_code = 3


class ShapeError(DataError):
    exit_code = 3


class DegenerateDataError(DataError):
    exit_code = 3


class NumericError(FslfError, ArithmeticError):
    exit_code = 4
