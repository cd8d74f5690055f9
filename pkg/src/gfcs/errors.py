"""Typed errors shared across the package."""


class GfcsError(Exception):
    """Base class for all package errors."""


class InvalidInputError(GfcsError):
    """An argument violates a documented precondition (shape, range, finiteness)."""


class NumericalFailureError(GfcsError):
    """An iterative numerical routine failed to converge.

    Carries the final residual so callers can judge how bad it was.
    """

    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class ParseError(GfcsError):
    """A serialized artifact is malformed. ``byte_offset`` locates the problem."""

    def __init__(self, message, byte_offset):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class UnsupportedVersionError(GfcsError):
    """A serialized artifact declares a format version this build cannot read."""


class TrainingFailureError(GfcsError):
    """Training diverged (non-finite loss)."""


class EmptySelectionError(GfcsError):
    """A filter retained no items."""


class DegenerateDirectionError(GfcsError):
    """A candidate direction had (near-)zero norm; callers resample or skip."""


class CursorExhaustedError(GfcsError):
    """A fixed ordered basis ran out of directions."""


class BudgetExceededError(GfcsError):
    """The victim query budget is spent. Attack loops catch this and fail the run."""


class ShortfallError(GfcsError):
    """Fewer usable examples than requested."""
