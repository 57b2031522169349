"""Exception taxonomy shared across the package.

Each class maps to one CLI exit-code category (see cli.EXIT_CODES).
"""


class CtrLabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CtrLabError):
    """Invalid configuration value or combination."""


class InputError(CtrLabError):
    """Malformed runtime input (bad feature id, shape mismatch, non-finite logit)."""


class DataError(CtrLabError):
    """Unusable data: missing attributes, unparseable files, bad schemas."""


class StreamError(DataError):
    """Event stream violates ordering guarantees beyond the tolerated window."""


class TrainingError(CtrLabError):
    """Optimization failure, e.g. non-finite gradients."""


class UndefinedMetricError(CtrLabError):
    """Metric has no defined value for this input (e.g. single-class AUC)."""
