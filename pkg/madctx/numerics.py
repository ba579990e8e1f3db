"""
Dense linear algebra kernel shared by every other module.

Matrices are 2-D float64 numpy arrays, vectors are 1-D. Flattening is always
row-major. Every public operation is pure and rejects non-finite results.
"""
from typing import Iterable, Optional, Sequence

import numpy as np

from madctx.exceptions import DimensionError

# Smallest ridge added to the normal equations; selection pools can be rank-deficient.
RIDGE_FLOOR = 1e-8


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DimensionError(f"{name} must be a non-empty 2-D matrix, got shape {arr.shape}")
    _check_finite(arr, name)
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] == 0:
        raise DimensionError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    _check_finite(arr, name)
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DimensionError(f"{name} contains non-finite entries")


def frobenius_norm(m: np.ndarray) -> float:
    """sqrt of the sum of squared entries. Realizes every matrix norm in the losses and bounds."""
    arr = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(arr * arr)))


def softmax_columns(m: np.ndarray) -> np.ndarray:
    arr = as_matrix(m)
    shifted = arr - arr.max(axis=0, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=0, keepdims=True)


def solve_least_squares(A: np.ndarray, b: np.ndarray, ridge: float = 0.0) -> np.ndarray:
    """
    Return w minimizing ||A w - b||^2 + ridge * ||w||^2 via the normal equations.

    The ridge actually applied is never below RIDGE_FLOOR.
    """
    A = as_matrix(A, "A")
    b = as_vector(b, "b")
    if A.shape[0] != b.shape[0]:
        raise DimensionError(f"A has {A.shape[0]} rows but b has dimension {b.shape[0]}")
    if ridge < 0:
        raise DimensionError("ridge must be nonnegative")
    lam = max(float(ridge), RIDGE_FLOOR)
    gram = A.T @ A
    gram[np.diag_indices_from(gram)] += lam
    w = np.linalg.solve(gram, A.T @ b)
    _check_finite(w, "least-squares solution")
    return w


def least_squares_residual(A: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    return float(np.linalg.norm(A @ w - b))


def concat_columns(parts: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """Column concatenation, left to right. `None` parts are skipped (absent blocks)."""
    present = [as_matrix(p, f"part {i}") for i, p in enumerate(parts) if p is not None]
    if not present:
        raise DimensionError("concat_columns needs at least one part")
    rows = present[0].shape[0]
    for i, p in enumerate(present):
        if p.shape[0] != rows:
            raise DimensionError(f"part {i} has {p.shape[0]} rows, expected {rows}")
    return np.concatenate(present, axis=1)


def pad_columns(m: np.ndarray, cols: int) -> np.ndarray:
    """Zero-pad on the right up to `cols` columns."""
    if m.shape[1] >= cols:
        return m
    return np.pad(m, ((0, 0), (0, cols - m.shape[1])))


def padded_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Frobenius distance after zero-padding the narrower matrix on the right."""
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"row mismatch: {a.shape[0]} vs {b.shape[0]}")
    cols = max(a.shape[1], b.shape[1])
    return frobenius_norm(pad_columns(a, cols) - pad_columns(b, cols))


def column_mean(parts: Iterable[np.ndarray], shape: tuple) -> np.ndarray:
    """Element-wise mean of equally shaped matrices; zeros when there are none."""
    parts = list(parts)
    if not parts:
        return np.zeros(shape)
    for p in parts:
        if p.shape != shape:
            raise DimensionError(f"expected shape {shape}, got {p.shape}")
    return np.mean(np.stack(parts), axis=0)


def unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DimensionError("cannot normalize a zero vector")
    return v / norm
