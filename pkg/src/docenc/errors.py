"""Exception types shared across the package."""

from __future__ import annotations


class DocEncError(Exception):
    """Base class for all package errors."""


class DimensionError(DocEncError):
    """Tensor shapes incompatible for the requested operation."""


class GeometryError(DocEncError):
    """Image / patch-grid geometry mismatch."""


class ClassRangeError(DocEncError):
    """Class index outside the valid range for the logit width."""


class EvaluationError(DocEncError):
    """A numeric evaluation produced a non-finite value."""


class DegenerateMaskError(DocEncError):
    """Mask plan with no masked or no visible patches."""


class DegenerateSampleError(DocEncError):
    """Training sample with an empty loss mask."""


class DivergenceError(DocEncError):
    """Training loss became non-finite."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class CheckpointIncompatibilityError(DocEncError):
    """Parameter store missing or mismatching a required entry."""


class FormatError(DocEncError):
    """Malformed checkpoint file."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class FrozenViolationError(DocEncError):
    """Attempt to update parameters of a frozen store."""


class CoordRangeError(DocEncError):
    """Coordinate outside the image bounds."""


class EmptyInputError(DocEncError):
    """Operation called on empty input."""


class UsageError(DocEncError):
    """Invalid user-facing option or method name."""
