"""Centroid-indexed sparse attention over a fixed context."""

from .errors import (
    CalibrationError,
    DimensionError,
    FormatError,
    InvariantError,
    NoKeysAttendedError,
)

__version__ = "0.1.0"

__all__ = [
    "CalibrationError",
    "DimensionError",
    "FormatError",
    "InvariantError",
    "NoKeysAttendedError",
    "__version__",
]
