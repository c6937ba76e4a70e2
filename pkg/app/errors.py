"""
Exception hierarchy shared by every gatn module
"""


class GatnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GatnError, ValueError):
    """Tensor dimensions do not agree; the message names the offending axis."""


class UsageError(GatnError, RuntimeError):
    """An operation was called in a way its contract does not allow."""


class CheckpointError(GatnError, OSError):
    """A checkpoint file is missing, corrupt or does not match the model layout."""


class VerificationError(GatnError):
    """A gradient check exceeded its tolerance."""
