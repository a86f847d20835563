"""Exception types raised by protofed."""


class ProtofedError(Exception):
    """Base class for all package errors."""


class ConfigError(ProtofedError):
    """Invalid or inconsistent experiment configuration."""


class InputError(ProtofedError):
    """Bad argument passed to a library function."""


class IngestionError(ProtofedError):
    """Dataset file is missing, truncated, or malformed."""


class PartitionError(ProtofedError):
    """Client partition cannot be built from the given dataset."""


class AggregationError(ProtofedError):
    """Prototype aggregation received inconsistent inputs."""


class EvaluationError(ProtofedError):
    """Metric evaluation received inconsistent inputs."""


class AttackConfigError(ConfigError):
    """Attack settings are invalid for the chosen attack kind."""


class DivergenceError(ProtofedError):
    """Training produced non-finite values."""
