"""Exception hierarchy shared by every stage of the pipeline."""
from __future__ import annotations


class RetroforecastError(RuntimeError):
    """Root of all errors raised on purpose by this package."""


class GenerationError(RetroforecastError):
    pass


class IngestError(RetroforecastError):
    pass


class ShapeError(RetroforecastError, ValueError):
    pass


class TapeError(RetroforecastError):
    pass


class NonFiniteError(RetroforecastError):
    pass


class InsufficientDataError(RetroforecastError):
    pass


class DivergenceError(NonFiniteError):
    pass


class ModelError(RetroforecastError):
    pass


class ScorecardInputError(RetroforecastError):
    pass


class IncompleteRunError(RetroforecastError):
    pass


class StageError(RetroforecastError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
        self.detail = message

    def __reduce__(self):
        return type(self), (self.stage, self.detail)


class UsageError(RetroforecastError):
    """Bad command-line arguments."""
