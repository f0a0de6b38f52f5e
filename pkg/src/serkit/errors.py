"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage problems exit 1,
DataError exits 2, NumericalError exits 3.
"""


class DataError(Exception):
    """Invalid or unreadable input data (manifests, WAV files, configs)."""


class NumericalError(Exception):
    """A computation produced a non-finite or otherwise unusable value."""
