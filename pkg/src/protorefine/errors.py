"""Exception hierarchy shared by every module."""


class RefineError(Exception):
    """Base class for all package errors."""


class ValidationError(RefineError, ValueError):
    """Bad user input: config values, shapes, manifest contents."""


class ManifestError(ValidationError):
    """A manifest is missing, malformed, or references missing files."""


class CheckpointMismatchError(ValidationError):
    """A checkpoint does not match the requested model configuration."""


class EmptyRegionError(RefineError, ValueError):
    """Mask average pooling was asked to pool over zero pixels."""


class StoreCorruptionError(RefineError):
    """A patch-store record failed its checksum."""

    def __init__(self, pair_id, message=None):
        self.pair_id = pair_id
        super().__init__(message or f"patch store record {pair_id!r} is corrupted")


class DivergenceError(RefineError):
    """Training produced a non-finite loss."""
