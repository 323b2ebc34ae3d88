"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class PathReidError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(PathReidError):
    """Invalid configuration file, flag value, or hyperparameter."""


class DataError(PathReidError):
    """Dataset or catalog violates a schema or invariant."""


class DivergenceError(PathReidError):
    """A numeric quantity became NaN/Inf during training or inference."""

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}
