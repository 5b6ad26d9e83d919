"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import numbers

import numpy as np


def check_observations(Y, d_y: int | None = None) -> tuple[np.ndarray, bool]:
    """Coerce ``Y`` to a float64 ``(B, T, d_y)`` stack.

    Returns the stack and whether the input was a single ``(T, d_y)`` sequence.
    """
    arr = np.asarray(Y, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (T, d_y) or (B, T, d_y) observations, "
                         f"got shape {np.shape(Y)}")
    if arr.shape[1] < 1:
        raise ValueError("need at least one observation time")
    if d_y is not None and arr.shape[2] != d_y:
        raise ValueError(f"observations have {arr.shape[2]} features, "
                         f"model expects {d_y}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("observations contain NaN or Inf")
    return arr, single


def check_states(X, d_x: int) -> np.ndarray:
    """``(n, d_x)`` float64 states."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != d_x:
        raise ValueError(f"expected states of shape (n, {d_x}), got {np.shape(X)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("states contain NaN or Inf")
    return arr


def check_positive_int(name: str, value, minimum: int = 1) -> int:
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_seed(seed) -> int:
    """Seeds are unsigned 64-bit integers."""
    if not isinstance(seed, numbers.Integral) or not 0 <= seed < 2 ** 64:
        raise ValueError(f"seed must be an integer in [0, 2^64), got {seed!r}")
    return int(seed)
