"""Dense tensor helpers and the small linear-algebra kernels used by the merging code.

Storage is float32 (what checkpoints hold); every kernel here upcasts to
float64 before accumulating and returns float64 results. Callers that need a
storable value pass the result through :func:`as_tensor`.
"""
from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError, SVDConvergenceError

__all__ = [
    "as_tensor",
    "matmul",
    "svd",
    "pinv",
    "solve_least_squares",
    "sym_inv_sqrt",
]


def as_tensor(data, shape=None) -> np.ndarray:
    """Return an immutable float32 array, rejecting NaN/Inf entries."""
    arr = np.array(data, dtype=np.float32)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape, dtype=np.int64)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf entries")
    arr.flags.writeable = False
    return arr


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a, b = _f64(a), _f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def svd(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD with a deterministic sign convention.

    Returns ``(U, S, Vt)`` with ``S`` descending and the first entry of each
    column of ``U`` that is not (numerically) zero made nonnegative; the
    matching row of ``Vt`` is flipped with it.
    """
    a = _f64(a)
    if a.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("svd input contains NaN or Inf entries")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SVDConvergenceError(str(exc)) from exc
    tol = 1e-12 * max(1.0, float(np.abs(u).max(initial=0.0)))
    for j in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, j]) > tol)
        if nz.size and u[nz[0], j] < 0:
            u[:, j] = -u[:, j]
            vt[j, :] = -vt[j, :]
    return u, s, vt


def pinv(a, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse built on :func:`svd`."""
    u, s, vt = svd(a)
    cutoff = rcond * (s[0] if s.size else 0.0)
    inv = np.zeros_like(s)
    keep = s > cutoff
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T


def solve_least_squares(A, B) -> np.ndarray:
    """Minimise ``||X A - B||_F`` over X.

    ``A`` must be square (n x n) and ``B`` is m x n. Singular ``A`` is handled
    through the pseudoinverse, which also picks the minimum-norm solution.
    """
    A, B = _f64(A), _f64(B)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"A must be square, got {A.shape}")
    if B.ndim != 2 or B.shape[1] != A.shape[0]:
        raise ShapeError(f"B must have {A.shape[0]} columns, got {B.shape}")
    return B @ pinv(A)


def sym_inv_sqrt(m, floor: float = 1e-8) -> np.ndarray:
    """Inverse square root of a symmetric PSD matrix with an eigenvalue floor."""
    m = _f64(m)
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    w = np.maximum(w, floor)
    return (v / np.sqrt(w)) @ v.T
