"""Exception hierarchy shared by all fedunlearn modules."""


class FedUnlearnError(Exception):
    """Base class for every error raised by this package."""


class SpecError(FedUnlearnError, ValueError):
    """Invalid network specification (incompatible layer sizes, bad class count)."""


class ShapeError(FedUnlearnError, ValueError):
    """Array shapes do not line up with the network or with each other."""


class NumericError(FedUnlearnError, FloatingPointError):
    """A non-finite value appeared in a computation."""


class DataFormatError(FedUnlearnError, ValueError):
    """Malformed or truncated dataset file."""


class NothingToForgetError(FedUnlearnError, ValueError):
    """Unlearning was requested but no sample is flagged for removal."""


class UndefinedMetricError(FedUnlearnError, ZeroDivisionError):
    """A ratio metric has a zero denominator."""


class InsufficientDataError(FedUnlearnError, ValueError):
    """Too few samples for a statistical procedure."""


class ConfigError(FedUnlearnError, ValueError):
    """Experiment configuration failed validation."""
