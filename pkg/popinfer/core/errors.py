"""Exception hierarchy for popinfer.

Input problems derive from ``ValueError`` so callers that only know the
standard library still catch them.
"""
from typing import Optional, Sequence


class PopinferError(Exception):
    """Base class for every error raised by popinfer."""


class InputError(PopinferError, ValueError):
    """Invalid arguments or data."""


class DimensionError(InputError):
    """Matrix or vector shapes are mutually inconsistent."""


class StrategySpaceOverflowError(InputError, OverflowError):
    """The requested strategy space is too large to count."""


class SeriesFormatError(InputError):
    """A price-series file could not be parsed."""

    def __init__(self, message: str, lines: Optional[Sequence[int]] = None):
        self.lines = list(lines or [])
        if self.lines:
            message = f"{message} (line {', '.join(str(n) for n in self.lines[:10])})"
        super().__init__(message)


class LogDomainError(InputError):
    """Non-positive argument to a logarithm."""


class NumericalError(PopinferError):
    """A numerical routine failed."""


class SingularInnovationError(NumericalError):
    """Residual covariance S is singular or too badly conditioned to invert."""

    def __init__(self, condition: float, limit: float):
        self.condition = condition
        self.limit = limit
        super().__init__(f"Residual covariance condition number {condition:.3e} exceeds {limit:.1e}")


class NoiseNotReadyError(PopinferError):
    """The residual window is not full yet; use the fallback noise levels."""


class SynthesisError(PopinferError):
    """The synthetic market generator could not produce a valid series."""


class EnsembleError(PopinferError):
    """No valid runs are available to aggregate."""
