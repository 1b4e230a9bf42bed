"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class PatchcastError(Exception):
    """Base class for all package-specific errors."""


class UsageError(PatchcastError):
    """Bad arguments, flags, or configuration values."""


class DataError(PatchcastError):
    """Malformed input data: files, CSV rows, shapes, empty corpora."""


class NumericError(PatchcastError):
    """Non-finite values or numerically invalid states during computation."""
