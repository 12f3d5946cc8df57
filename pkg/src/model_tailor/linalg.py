"""Dense float64 linear algebra with a deterministic evaluation order.

Matrices are plain 2-D C-contiguous float64 ndarrays. Every product runs
through :func:`matmul`, which uses ``np.einsum`` without an optimize path:
the contraction is a fixed left-to-right loop in C, never dispatched to
BLAS, so results are bit-identical across runs and thread counts.

Sizes here are desk scale (a few dozen columns), so the O(d^3) factorization
and substitution loops below are plenty fast and stay predictable.
"""

from __future__ import annotations

import numpy as np

from .errors import DefinitenessError, ShapeError, SingularPivotError, ValidationError

# Below this, an inverse-Hessian diagonal entry is treated as a dead pivot.
PIVOT_FLOOR = 1e-12

# Absolute asymmetry allowed on validation, relative to the largest entry.
SYMMETRY_TOL = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and canonicalize an array as a finite 2-D float64 matrix."""
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{name} contains non-finite entries")
    return out


def matmul(a, b) -> np.ndarray:
    """Matrix product with fixed summation order (no BLAS reassociation)."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.einsum("ij,jk->ik", a, b)


def _require_symmetric(h: np.ndarray, name: str) -> np.ndarray:
    """Check symmetry within tolerance, then return the symmetrized matrix."""
    if h.shape[0] != h.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {h.shape}")
    scale = max(1.0, float(np.max(np.abs(h))) if h.size else 1.0)
    gap = float(np.max(np.abs(h - h.T))) if h.size else 0.0
    if gap > SYMMETRY_TOL * scale:
        raise ValidationError(f"{name} is not symmetric (max asymmetry {gap:.3e})")
    return (h + h.T) / 2.0


def cholesky(h) -> np.ndarray:
    """Lower-triangular L with L L^T = h for symmetric positive definite h.

    Raises:
        DefinitenessError: naming the first non-positive pivot index.
    """
    h = _require_symmetric(as_matrix(h, "h"), "h")
    n = h.shape[0]
    low = np.zeros_like(h)
    for j in range(n):
        if j:
            s = np.einsum("ik,k->i", low[j:, :j], low[j, :j])
        else:
            s = np.zeros(n - j)
        pivot = h[j, j] - s[0]
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise DefinitenessError(pivot=j)
        low[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            low[j + 1 :, j] = (h[j + 1 :, j] - s[1:]) / low[j, j]
    return low


def solve_lower(low: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Forward substitution: solve low @ y = rhs for lower-triangular low."""
    n = low.shape[0]
    y = np.zeros_like(rhs)
    for i in range(n):
        if i:
            acc = np.einsum("k,kj->j", low[i, :i], y[:i, :])
        else:
            acc = 0.0
        y[i, :] = (rhs[i, :] - acc) / low[i, i]
    return y


def solve_upper(up: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Back substitution: solve up @ x = rhs for upper-triangular up."""
    n = up.shape[0]
    x = np.zeros_like(rhs)
    for i in range(n - 1, -1, -1):
        if i + 1 < n:
            acc = np.einsum("k,kj->j", up[i, i + 1 :], x[i + 1 :, :])
        else:
            acc = 0.0
        x[i, :] = (rhs[i, :] - acc) / up[i, i]
    return x


def solve_spd(h: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve h @ x = rhs for symmetric positive definite h via Cholesky."""
    rhs = as_matrix(rhs, "rhs")
    low = cholesky(h)
    if rhs.shape[0] != low.shape[0]:
        raise ShapeError(f"solve dimension mismatch: {low.shape} vs {rhs.shape}")
    return solve_upper(low.T, solve_lower(low, rhs))


def sym_inverse(h) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix; result is symmetric."""
    h = as_matrix(h, "h")
    inv = solve_spd(h, np.eye(h.shape[0]))
    return (inv + inv.T) / 2.0


def obs_downdate(hinv, m: int) -> np.ndarray:
    """Remove coordinate m from an inverse: hinv - hinv[:,m] hinv[m,:] / hinv[m,m].

    The surviving block equals the inverse of the original matrix with row and
    column m deleted. Row and column m of the result are set to exact zero.

    Raises:
        SingularPivotError: when hinv[m, m] is at or below the pivot floor.
    """
    hinv = as_matrix(hinv, "hinv")
    n = hinv.shape[0]
    if not 0 <= m < n:
        raise ValidationError(f"coordinate {m} out of range for {n}x{n} inverse")
    pivot = float(hinv[m, m])
    if pivot <= PIVOT_FLOOR:
        raise SingularPivotError(f"inverse diagonal {pivot:.3e} at coordinate {m} is not usable")
    col = hinv[:, m]
    out = hinv - np.outer(col, col) / pivot
    out[m, :] = 0.0
    out[:, m] = 0.0
    return out
