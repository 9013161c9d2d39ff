"""Input validation helpers shared by the estimator-style API."""

from __future__ import annotations

import numpy as np

from .errors import EmptyInput


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    """Reject NaN/Inf entries."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def as_points(obj, name: str = "points") -> np.ndarray:
    """Coerce to a finite (K, 2) float64 array."""
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim == 1 and arr.shape == (2,):
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (K, 2), got {arr.shape}")
    return check_finite(arr, name)


def check_nonempty(seq, name: str = "input"):
    if len(seq) == 0:
        raise EmptyInput(f"{name} is empty")
    return seq


def check_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be > 0, got {value}")
    return value
