"""Dense linear-algebra primitives with explicit numerical contracts.

Everything here is a pure function of its inputs. Tolerances are module
constants; each function also accepts an override.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import DegenerateColumns, NotPositiveDefinite

GS_TOL = 1e-12
PIVOT_TOL = 1e-12
SYMMETRY_TOL = 1e-10


def _check_symmetric(M: np.ndarray, tol: float) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    scale = max(np.abs(M).max(), 1.0)
    if np.abs(M - M.T).max() > tol * scale:
        raise ValueError("matrix is not symmetric")


def gram_schmidt_orthonormalize(A, tol: float = GS_TOL) -> np.ndarray:
    """Orthonormalize the columns of `A` left to right.

    Modified Gram-Schmidt with a second projection pass, so column k of the
    result is column k of `A` with its components along columns 0..k-1
    removed, then normalized.

    Raises
    ------
    DegenerateColumns
        If a projected column has norm below `tol` (relative to its original
        norm when that is larger than one).
    """
    A = np.array(A, dtype=float, copy=True)
    if A.ndim != 2:
        raise ValueError("A must be two-dimensional")
    n, k = A.shape
    if k > n:
        raise DegenerateColumns(f"cannot orthonormalize {k} columns in dimension {n}")
    Q = np.empty_like(A)
    for j in range(k):
        v = A[:, j].copy()
        scale = max(np.linalg.norm(v), 1.0)
        for _ in range(2):
            for i in range(j):
                v -= (Q[:, i] @ v) * Q[:, i]
        norm = np.linalg.norm(v)
        if norm < tol * scale:
            raise DegenerateColumns(f"column {j} is (numerically) in the span of the previous columns")
        Q[:, j] = v / norm
    return Q


def cholesky_lower(M, pivot_tol: float = PIVOT_TOL, sym_tol: float = SYMMETRY_TOL) -> np.ndarray:
    """Lower Cholesky factor L with L @ L.T == M and positive diagonal."""
    M = np.asarray(M, dtype=float)
    _check_symmetric(M, sym_tol)
    if not np.all(np.isfinite(M)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    # numpy accepts tiny positive pivots; enforce the relative floor.
    pivots = np.diag(L) ** 2
    if pivots.min() <= pivot_tol * np.abs(np.diag(M)).max():
        raise NotPositiveDefinite(f"pivot {pivots.min():.3g} below tolerance")
    return L


def sym_eig(M, sym_tol: float = SYMMETRY_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    Returns eigenvalues in descending order and orthonormal eigenvectors as
    columns. Each eigenvector is signed so that its entry of largest absolute
    value is positive (ties go to the lowest index).
    """
    M = np.asarray(M, dtype=float)
    _check_symmetric(M, sym_tol)
    lam, V = np.linalg.eigh((M + M.T) / 2)
    order = np.argsort(-lam, kind="stable")
    lam, V = lam[order], V[:, order]
    return lam, V * sign_by_largest_entry(V)


def sign_by_largest_entry(V: np.ndarray) -> np.ndarray:
    """Per-column sign (+1/-1) making the largest-|entry| of each column positive."""
    idx = np.argmax(np.abs(V), axis=0)  # argmax returns the first maximum
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def solve_spd(M, B, pivot_tol: float = PIVOT_TOL) -> np.ndarray:
    """Solve M X = B for symmetric positive-definite M via one Cholesky factorization."""
    M = np.asarray(M, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.shape[0] != M.shape[0]:
        raise ValueError(f"row mismatch: M is {M.shape}, B is {B.shape}")
    L = cholesky_lower(M, pivot_tol=pivot_tol)
    return scipy.linalg.cho_solve((L, True), B, check_finite=False)


def logdet_spd(M) -> float:
    L = cholesky_lower(M)
    return 2.0 * float(np.log(np.diag(L)).sum())
