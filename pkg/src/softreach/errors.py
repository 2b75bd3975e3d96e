"""Package-level exception types."""

from __future__ import annotations


class NonFiniteError(RuntimeError):
    """A forward or backward pass produced NaN/inf.

    ``step`` is the sequence index at which the first non-finite value
    appeared, when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class TrainingDiverged(RuntimeError):
    """Training loss left the finite range; carries the partial report."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
