"""Exception types shared across lesionnet."""
from __future__ import annotations

from typing import Optional


class LesionNetError(Exception):
    """Base class for all errors raised by lesionnet."""


class ShapeError(LesionNetError, ValueError):
    """Tensor or layer shapes do not fit together."""


class ArchSpecError(LesionNetError, ValueError):
    """An architecture file could not be parsed or validated."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(LesionNetError, ValueError):
    """Dataset manifests, splits or images are unusable."""


class CheckpointError(LesionNetError, ValueError):
    """A checkpoint file is malformed or incompatible."""


class DivergenceError(LesionNetError, RuntimeError):
    """Training produced a non-finite loss."""


class SearchSpaceError(LesionNetError, ValueError):
    """A search space admits no valid architecture for a requested edit."""


__all__ = [
    "LesionNetError",
    "ShapeError",
    "ArchSpecError",
    "DataError",
    "CheckpointError",
    "DivergenceError",
    "SearchSpaceError",
]
