"""
Exception hierarchy for the spatial memory and navigation stack.
"""


class SpatialNavError(Exception):
    """Base class for all errors raised by spatialnav."""
    pass


class ContractViolation(SpatialNavError, ValueError):
    """Raised when a caller breaks an operation's precondition."""
    pass


class InvalidDepthError(SpatialNavError, ValueError):
    """Raised when a depth sample is non-positive or non-finite."""
    pass


class OutOfBoundsError(SpatialNavError, IndexError):
    """Raised when a point or index falls outside the voxel grid."""
    pass


class RetrievalUnavailableError(SpatialNavError):
    """Raised when an external interface (reasoner, imaginer, ...) cannot answer."""
    pass


class AdapterParseError(RetrievalUnavailableError):
    """Raised when a remote reply does not follow its role's wire contract."""
    pass


class EpisodeFinishedError(SpatialNavError):
    """Raised when an action is issued after the episode has stopped."""
    pass


class ConfigError(SpatialNavError):
    """Raised for invalid or unreadable configuration."""
    pass


class PersistenceError(SpatialNavError):
    """Raised when a memory file is missing, truncated or has the wrong format."""
    pass
