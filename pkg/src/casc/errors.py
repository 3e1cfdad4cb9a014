"""Exception taxonomy shared across the package."""


class CascError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CascError):
    """A config value or combination of config values is invalid."""


class ArgumentError(CascError, ValueError):
    """A runtime argument violates an operation's contract."""


class DataError(CascError):
    """A dataset is empty, truncated, or otherwise unusable."""


class FormatError(CascError):
    """A file does not match its declared binary format."""


class DegenerateInputError(CascError, ValueError):
    """Input is mathematically degenerate (e.g. all-zero signal)."""


class AssetError(CascError):
    """A pretrained metric asset is missing or malformed."""


class NumericError(CascError):
    """A numeric computation left its domain of validity."""
