"""Shared exception types."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration value."""


class ContractError(ValueError):
    """A documented call contract was violated."""


class MetricError(ValueError):
    """Metric undefined for the given inputs (e.g. single-class labels)."""


class FormatError(ValueError):
    """Malformed or truncated serialized file."""
