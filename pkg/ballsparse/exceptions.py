"""
Error types raised by the Ball Sparse Attention toolkit
All errors subclass ValueError so callers written against plain ValueError keep working
"""


class BsaError(ValueError):
    """Base class for toolkit errors"""


class InvalidArgumentError(BsaError):
    """An argument is outside its documented domain (e.g. ball_size = 0)"""


class RejectedInputError(BsaError):
    """Input data is unusable (e.g. non-finite coordinates)"""


class ShapeError(BsaError):
    """Array shapes disagree with each other or with the configuration"""


class InvalidConfigError(BsaError):
    """Configuration violates a static or use-time invariant"""


class FullyMaskedError(BsaError):
    """An attention row has no admissible key"""


class StaleWorkspaceError(BsaError):
    """A workspace does not belong to the forward pass being differentiated"""


class InvariantViolation(BsaError):
    """Internal consistency check failed (indicates a bug, not bad input)"""
