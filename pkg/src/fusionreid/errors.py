"""Exception hierarchy shared by all fusionreid modules.

The CLI maps these onto exit codes: config/usage problems exit 2, data
problems exit 3 and numeric failures (NaN/Inf) exit 4.
"""


class FusionReidError(Exception):
    """Base class for all library errors."""


class DimensionError(FusionReidError):
    """Operand shapes are incompatible for the requested kernel."""


class UsageError(FusionReidError):
    """An API was called in a way its contract forbids."""


class ConfigError(FusionReidError):
    """A configuration value is invalid or inconsistent."""


class DataError(FusionReidError):
    """Dataset files are missing, unreadable or malformed."""


class IntegrityError(FusionReidError):
    """Internal state is inconsistent (missing gradient, bad checkpoint)."""


class NumericError(FusionReidError):
    """A kernel produced NaN or Inf."""


class EvaluationError(FusionReidError):
    """Retrieval evaluation cannot produce a result (no valid query)."""
