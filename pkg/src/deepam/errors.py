"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid user-supplied configuration (flags, arch strings, bad combinations)."""


class DataError(Exception):
    """Unusable input data: unreadable or malformed images, empty directories."""


class ModelFormatError(DataError):
    """Corrupt or incompatible model file."""


class NumericalError(Exception):
    """Numerical failure: degenerate rank, singular systems, dead searches."""
