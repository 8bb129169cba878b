"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: ConfigError -> 1, DataError (incl.
FormatError) -> 2, NumericError -> 3.
"""


class AdapoolError(Exception):
    pass


class ConfigError(AdapoolError):
    """Invalid or inconsistent configuration."""


class DataError(AdapoolError):
    """Problem with input data (exhausted pools, missing files, ...)."""


class FormatError(DataError):
    """Malformed binary embedding file."""


class NumericError(AdapoolError):
    """Non-finite values encountered where finiteness is required."""


class UsageError(AdapoolError):
    """API called outside its contract."""


class DimensionError(UsageError):
    """Shape mismatch between arrays."""


class RoutingError(UsageError):
    """Task id cannot be resolved to an adapter slot or head."""


class DistillError(AdapoolError):
    """Consolidation cannot proceed (e.g. empty distillation buffer)."""
