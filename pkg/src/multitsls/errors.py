"""Exception hierarchy shared across the package."""
from __future__ import annotations


class MultiTSLSError(Exception):
    """Base class for all package errors."""


class ValidationError(MultiTSLSError, ValueError):
    """Malformed inputs: bad probabilities, shapes, labels or schemas."""


class ShapeError(ValidationError):
    """Array dimensions disagree with the design or coding."""


class EnumerationTooLarge(ValidationError):
    """Enumerating response types would exceed the configured cap."""


class DegenerateCellError(ValidationError):
    """A covariate cell has too few rows to demean."""

    def __init__(self, cells, message: str | None = None):
        self.cells = list(cells)
        super().__init__(message or f"degenerate covariate cells: {self.cells}")


class RankError(MultiTSLSError, ArithmeticError):
    """A moment matrix that must be inverted is singular or ill-conditioned.

    ``assumption`` names the identifying condition that failed so callers can
    surface it verbatim.
    """

    def __init__(self, message: str, assumption: str = "rank condition"):
        self.assumption = assumption
        super().__init__(f"{assumption}: {message}")
