"""Exception types shared across the package.

Each class carries the CLI exit code category it maps to.
"""


class SemDistillError(Exception):
    exit_code = 1


class UsageError(SemDistillError):
    exit_code = 2


class DataError(SemDistillError):
    exit_code = 3


class FormatError(DataError):
    """Malformed or truncated logit store file."""


class AlignmentError(DataError):
    """Logit store records do not line up with the dataset."""


class ShapeError(SemDistillError, ValueError):
    exit_code = 3


class NumericError(SemDistillError):
    """Non-finite values appeared during training or evaluation."""

    exit_code = 4


class StorageIOError(SemDistillError):
    exit_code = 5
