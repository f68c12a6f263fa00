"""Classical PLS with orthonormal loadings (the SVD of X'Y)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import DimensionMismatch, RankDeficient
from .model import DataPair

RANK_TOL = 1e-10
NIPALS_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class PlsFit:
    W: np.ndarray
    C: np.ndarray
    scoresT: np.ndarray
    scoresU: np.ndarray

    @property
    def r(self) -> int:
        return self.W.shape[1]


def fit_pls(data: DataPair, r: int, method: str = "svd", tol: float = NIPALS_TOL, max_iter: int = 100_000) -> PlsFit:
    """Fit r PLS components.

    ``method="svd"`` takes the leading singular vectors of X'Y. ``"nipals"``
    finds the same pairs one at a time by alternating w <- X'Yc, c <- Y'Xw and
    deflating the cross-product matrix after each component. Both return the
    loadings with the largest-|entry| of each W column positive.
    """
    if not 0 < r < min(data.N, data.p, data.q):
        raise DimensionMismatch(f"need 0 < r < min(N, p, q), got r={r}")
    X, Y = data.X, data.Y
    XtY = X.T @ Y
    if method == "svd":
        U, d, Vt = np.linalg.svd(XtY, full_matrices=False)
        if d[0] == 0 or np.sum(d > RANK_TOL * d[0]) < r:
            raise RankDeficient(f"X'Y has fewer than {r} singular values above {RANK_TOL:g} x max")
        W, C = U[:, :r], Vt[:r].T
    elif method == "nipals":
        W, C = _nipals(XtY, r, tol, max_iter)
    else:
        raise ValueError(f"unknown PLS method {method!r}")
    signs = numerics.sign_by_largest_entry(W)
    W, C = W * signs, C * signs
    return PlsFit(W=W, C=C, scoresT=X @ W, scoresU=Y @ C)


def _nipals(XtY: np.ndarray, r: int, tol: float, max_iter: int):
    M = XtY.copy()
    top = np.linalg.norm(M, 2)
    W = np.zeros((M.shape[0], r))
    C = np.zeros((M.shape[1], r))
    for k in range(r):
        c = M[np.argmax(np.sum(M**2, axis=1))].copy()  # start from the heaviest row
        if np.linalg.norm(c) <= RANK_TOL * top:
            raise RankDeficient(f"cross-product matrix exhausted after {k} components")
        c /= np.linalg.norm(c)
        for _ in range(max_iter):
            w = M @ c
            w /= np.linalg.norm(w)
            c_new = M.T @ w
            d = np.linalg.norm(c_new)
            c_new /= d
            if np.linalg.norm(c_new - c) < tol:
                c = c_new
                break
            c = c_new
        if d <= RANK_TOL * top:
            raise RankDeficient(f"X'Y has fewer than {r} singular values above {RANK_TOL:g} x max")
        W[:, k], C[:, k] = w, c
        M = M - d * np.outer(w, c)
    return W, C
