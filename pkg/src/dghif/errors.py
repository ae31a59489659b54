"""Typed errors shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""


class DomainError(ValueError):
    """A value lies outside an operation's mathematical domain."""


class GraphError(ValueError):
    """Malformed graph input (bad node ids, empty edge sets, ...)."""


class ConfigError(ValueError):
    """Invalid or unknown experiment configuration."""


class CheckpointError(ValueError):
    """Unreadable, incompatible, or mismatched checkpoint."""
