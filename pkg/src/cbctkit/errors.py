"""Exception types shared across the toolkit.

The CLI maps these onto its exit codes: ConfigError -> 2,
NumericalError -> 3, FileFormatError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value, unknown key, or inconsistent setup."""


class NumericalError(RuntimeError):
    """A numerical routine failed (divergence, adjoint mismatch, ...)."""


class FileFormatError(IOError):
    """A data file does not match its declared on-disk format."""
