"""Input validation helpers.

Small checked coercions used at every public entry point. They normalize
array-likes to float64 ndarrays and fail loudly with InvalidInputError instead
of letting NaNs or ragged shapes propagate into the numeric core.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError


def as_point(p, name: str = "point") -> np.ndarray:
    """Coerce to a finite (2,) float64 array (x, y)."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (2,):
        raise InvalidInputError(f"{name} must have shape (2,), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite, got {arr}")
    return arr


def as_points(pts, name: str = "points", allow_empty: bool = True) -> np.ndarray:
    """Coerce to a finite (N, 2) float64 array."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"{name} must have shape (N, 2), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise InvalidInputError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} must be finite")
    return arr


def check_cell_index(ij, height: int, width: int, name: str = "cell") -> tuple[int, int]:
    i, j = int(ij[0]), int(ij[1])
    if not (0 <= i < height and 0 <= j < width):
        raise InvalidInputError(
            f"{name} index ({i}, {j}) outside lattice {height}x{width}"
        )
    return i, j


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise InvalidInputError(f"{name} must be a finite positive number, got {value}")
    return value


def check_in_range(value: float, lo: float, hi: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or not (lo <= value <= hi):
        raise InvalidInputError(f"{name} must lie in [{lo}, {hi}], got {value}")
    return value


def check_finite_array(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr
