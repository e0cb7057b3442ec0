"""Exception types shared across the package."""


class DataError(ValueError):
    """Invalid or unusable input data (maps to CLI exit code 2)."""


class FormatError(ValueError):
    """Unreadable or incompatible artifact file (draws, config)."""


class UsageError(ValueError):
    """Bad command-line arguments or configuration (exit code 1)."""
