"""Exception types shared across the package.

The CLI maps these onto process exit codes: UsageError -> 1,
NumericError -> 2, FormatError -> 3.
"""


class UsageError(ValueError):
    """Bad command-line arguments or configuration."""


class NumericError(RuntimeError):
    """NaN/divergence or other numeric failure during training/inference."""


class FormatError(IOError):
    """Malformed or incompatible dataset/checkpoint file."""
