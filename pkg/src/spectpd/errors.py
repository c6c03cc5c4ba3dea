"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, MissingArtifactError -> 3,
NumericalError -> 4. ShapeError is a ValueError so library callers that only
know numpy conventions still catch it naturally.
"""


class ShapeError(ValueError):
    """An array argument has incompatible extents; the message names the axis."""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config/sidecar file."""


class MissingArtifactError(FileNotFoundError):
    """A pipeline step requires an artifact that has not been produced yet."""


class NumericalError(ArithmeticError):
    """A numerical failure (non-finite loss, singular regression system)."""


class LockError(RuntimeError):
    """Another command currently holds the run-directory lock."""
