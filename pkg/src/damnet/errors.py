"""Error types shared across the package.

ConfigError maps to CLI exit code 2, NumericalError to exit code 3.
Plain ValueError is used for programmer errors (bad shapes, bad indices).
"""


class DamError(Exception):
    pass


class ConfigError(DamError):
    """Invalid configuration, file, or argument."""


class NumericalError(DamError):
    """Non-finite values or a failed numerical check."""
