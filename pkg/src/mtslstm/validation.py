"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numbers

import numpy as np

from .dyck import DyckSequence


def check_token_ids(X, vocab_size: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce ``X`` to a 1-d int64 token stream and range-check it."""
    arr = np.asarray(X)
    if arr.ndim == 2 and 1 in arr.shape:
        arr = arr.reshape(-1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d token id sequence, got shape {arr.shape}")
    if arr.size < 2:
        raise ValueError(f"{name} needs at least two tokens")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.mod(arr, 1) == 0):
            raise ValueError(f"{name} must contain integer token ids")
    arr = arr.astype(np.int64)
    if arr.min() < 0:
        raise ValueError(f"{name} contains negative token ids")
    if vocab_size is not None and arr.max() >= vocab_size:
        raise ValueError(f"{name} contains id {arr.max()} >= vocab size {vocab_size}")
    return arr


def check_sequences(X, name: str = "X") -> list[DyckSequence]:
    """Accept bracket strings or :class:`DyckSequence` objects."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a collection of sequences, not a single string")
    out = []
    for s in X:
        out.append(s if isinstance(s, DyckSequence) else DyckSequence(str(s)))
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_positive_samples(X, name: str = "X") -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_scalar(x, name: str, lo=None, hi=None, integer: bool = False):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(x, kind) or isinstance(x, bool):
        raise TypeError(f"{name} must be {'an integer' if integer else 'a number'}, got {type(x).__name__}")
    if lo is not None and x < lo:
        raise ValueError(f"{name} must be >= {lo}, got {x}")
    if hi is not None and x > hi:
        raise ValueError(f"{name} must be <= {hi}, got {x}")
    return x
