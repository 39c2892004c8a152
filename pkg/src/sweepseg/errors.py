"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError and UsageError are
configuration/usage problems (exit 2), everything else is a runtime
failure (exit 1).
"""


class DimensionError(ValueError):
    """Tensor extents do not match what an operation requires."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ValueError):
    """A file is malformed, truncated, or of the wrong version."""


class UsageError(RuntimeError):
    """An API was called out of protocol (e.g. backward without a loss root)."""


class DeterminismError(RuntimeError):
    """A callable that must be deterministic returned differing values."""


class UndefinedMetricError(ValueError):
    """A metric was requested on data that cannot define it."""
