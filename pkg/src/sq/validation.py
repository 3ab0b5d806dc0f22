"""Input validation helpers used across the public API."""

from __future__ import annotations

import numpy as np

from .errors import (
    EmptyVectorError,
    LengthMismatchError,
    NonFiniteInputError,
    ShapeMismatchError,
)


def as_float_array(x, name: str = "x") -> np.ndarray:
    """Coerce to a floating numpy array; integer input is promoted to float64."""
    arr = np.asarray(x)
    if arr.dtype.kind in "iub":
        arr = arr.astype(np.float64)
    if arr.dtype.kind != "f":
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    return arr


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(x, name: str = "x", allow_empty: bool = False) -> np.ndarray:
    arr = as_float_array(x, name)
    if arr.ndim != 1:
        raise ShapeMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise EmptyVectorError(f"{name} is empty")
    return arr


def check_finite(arr: np.ndarray, name: str = "x") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteInputError(f"{name} contains NaN or Inf")


def check_same_length(a: np.ndarray, b: np.ndarray, what: str = "vectors") -> None:
    if a.shape[0] != b.shape[0]:
        raise LengthMismatchError(
            f"{what} must have equal length, got {a.shape[0]} and {b.shape[0]}"
        )
