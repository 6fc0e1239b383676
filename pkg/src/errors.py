"""Exception types raised across the COPP toolkit."""

from typing import Any, Dict, Optional


class CoppError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class InvalidDatasetError(CoppError, ValueError):
    pass


class InvalidInputError(CoppError, ValueError):
    pass


class DegenerateLabelsError(InvalidInputError):
    """Raised when a classifier is asked to fit fewer than two label classes."""

    def __init__(self, message: str, stage: Optional[int] = None):
        super().__init__(message)
        self.stage = stage


class EmptyCalibrationError(CoppError, RuntimeError):
    """Raised when no calibration point survives pseudo-action matching.

    Args:
        message: Human readable reason
        diagnostics: Counts and match rates collected before the failure
    """

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NotFittedError(CoppError, RuntimeError):
    pass


class DegenerateNeighborhoodError(CoppError, RuntimeError):
    pass


class AggregateFailureError(CoppError, RuntimeError):
    pass


class ConfigError(CoppError, ValueError):
    pass


class InternalError(CoppError, RuntimeError):
    pass
