"""EM estimation of the PPLS parameters.

The E-step conditions the latent row (t, u) on the observed row (x, y); the
M-step maximizes the expected complete-data log-likelihood factor by factor,
keeping W and C orthonormal through an orthogonalizing factor L with
L L' = A'A, where A = X' E(T | X, Y).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import scipy.linalg

from . import numerics
from .errors import (
    DimensionMismatch,
    NegativeVariance,
    NonFiniteLikelihood,
    NotPositiveDefinite,
    RankDeficient,
)
from .model import DataPair, Theta, assemble_sigma, canonicalize_theta

log = logging.getLogger(__name__)

Orthogonalization = Literal["symmetric", "cholesky", "eigen"]
ORTHOGONALIZATIONS = ("symmetric", "cholesky", "eigen")
VARIANCE_FLOOR = 1e-12
RANK_TOL = 1e-10
INIT_NOISE_FLOOR = 1e-6
INIT_PERTURBATION = 1e-2


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit_ppls`.

    orthogonalization
        How L with L L' = A'A is chosen in the loading update.
        ``"symmetric"`` takes the symmetric square root V diag(sqrt(lam)) V',
        so W = A (A'A)^(-1/2) is the exact constrained maximizer.
        ``"cholesky"`` takes the lower Cholesky factor and ``"eigen"`` takes
        V diag(sqrt(lam)). Neither of those maximizes the expected
        log-likelihood over orthonormal W, so with them the iteration is not
        guaranteed to increase the likelihood.
    b_update
        ``"diagonal"`` sets b_k = E(u_k't_k) / E(t_k't_k), the maximizer over
        diagonal B. ``"hadamard"`` uses diag(E(U'T) E(T'T)^-1); the two agree
        whenever E(T'T) is diagonal.
    structured
        Evaluate the E-step and likelihood through the low-rank-plus-diagonal
        form of Sigma (cost independent of N and linear in p + q) instead of a
        dense (p+q) x (p+q) factorization.
    """

    max_iter: int = 10_000
    tol: float = 1e-6
    orthogonalization: Orthogonalization = "symmetric"
    seed: int = 0
    b_update: Literal["diagonal", "hadamard"] = "diagonal"
    structured: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.orthogonalization not in ORTHOGONALIZATIONS:
            raise ValueError(f"orthogonalization must be one of {ORTHOGONALIZATIONS}")
        if self.b_update not in ("diagonal", "hadamard"):
            raise ValueError("b_update must be 'diagonal' or 'hadamard'")


@dataclass(frozen=True, eq=False)
class EStepMoments:
    """Conditional moments of the latent scores given (X, Y) under ``theta``.

    ``cond_cov`` is the per-row conditional covariance of (t, u), 2r x 2r.
    ``muT``/``muU`` are only materialized by :func:`e_step`; the fitting loop
    works from the cross products ``XtMuT = X' muT`` and ``YtMuU = Y' muU``.
    """

    theta: Theta
    N: int
    Ctt: np.ndarray
    Cuu: np.ndarray
    Cut: np.ndarray
    expEE: float
    expFF: float
    expHH: float
    XtMuT: np.ndarray
    YtMuU: np.ndarray
    trXX: float
    trYY: float
    cond_cov: np.ndarray
    muT: Optional[np.ndarray] = None
    muU: Optional[np.ndarray] = None

    @property
    def r(self) -> int:
        return self.Ctt.shape[0]


@dataclass(frozen=True, eq=False)
class FitResult:
    theta: Theta
    loglik_trace: np.ndarray
    converged: bool
    iterations: int
    final_moments: EStepMoments
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])


# -- E-step -----------------------------------------------------------------


def _noise_expectations(theta, N, trXX, trYY, XtMuT, YtMuU, Ctt, Cuu, Cut):
    W, C, b = theta.W, theta.C, theta.b
    expEE = trXX - 2 * np.sum(XtMuT * W) + np.trace(W @ Ctt @ W.T)
    expFF = trYY - 2 * np.sum(YtMuU * C) + np.trace(C @ Cuu @ C.T)
    expHH = np.trace(Cuu) - 2 * np.sum(np.diag(Cut) * b) + np.sum(b**2 * np.diag(Ctt))
    return float(expEE), float(expFF), float(expHH)


def _assemble_moments(theta, N, p, S, K, V, muT=None, muU=None) -> EStepMoments:
    """Moments from the regression matrix K (rows of Z -> latent means) and
    the per-row conditional covariance V of (t, u)."""
    r = theta.r
    SK = S @ K
    M2 = N * (V + K.T @ SK)  # E[(T, U)'(T, U) | X, Y]
    Ctt, Cuu, Cut = M2[:r, :r], M2[r:, r:], M2[r:, :r]
    Ctt = (Ctt + Ctt.T) / 2
    Cuu = (Cuu + Cuu.T) / 2
    XtMuT = N * SK[:p, :r]
    YtMuU = N * SK[p:, r:]
    trXX = N * float(np.trace(S[:p, :p]))
    trYY = N * float(np.trace(S[p:, p:]))
    ee, ff, hh = _noise_expectations(theta, N, trXX, trYY, XtMuT, YtMuU, Ctt, Cuu, Cut)
    return EStepMoments(
        theta=theta, N=N, Ctt=Ctt, Cuu=Cuu, Cut=Cut, expEE=ee, expFF=ff, expHH=hh,
        XtMuT=XtMuT, YtMuU=YtMuU, trXX=trXX, trYY=trYY, cond_cov=V, muT=muT, muU=muU,
    )


def _dense_regression(theta: Theta):
    blocks = assemble_sigma(theta)
    cov = np.hstack([blocks.cov_t, blocks.cov_u])
    K = numerics.solve_spd(blocks.joint, cov)
    V = theta.latent_cov - cov.T @ K
    return K, (V + V.T) / 2


def _structured_regression(theta: Theta):
    """K and V through the latent-space form of the Gaussian conditioning.

    With Sigma = D + M G M', D = diag(se2 I_p, sf2 I_q), M = blkdiag(W, C)
    and G the latent covariance, the conditional covariance of (t, u) is
    V = (G^-1 + M'D^-1 M)^-1 and the conditional mean is z D^-1 M V.
    Also returns D^-1 M and log|Sigma|.
    """
    p, q, r = theta.dims
    W, C, b, st, sh = theta.W, theta.C, theta.b, theta.sigma_t2, theta.sigma_h2
    # G is made of 2 x 2 blocks [[st, st b], [st b, st b^2 + sh]] per
    # component, each with determinant st * sh
    det = st * sh
    i, j = np.arange(r), np.arange(r, 2 * r)
    Ginv = np.zeros((2 * r, 2 * r))
    Ginv[i, i] = (st * b**2 + sh) / det
    Ginv[j, j] = st / det
    Ginv[i, j] = Ginv[j, i] = -st * b / det
    prec = Ginv
    prec[:r, :r] += W.T @ W / theta.sigma_e2
    prec[r:, r:] += C.T @ C / theta.sigma_f2
    try:
        Lp = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("posterior precision of the latent scores is not positive definite") from None
    V = scipy.linalg.cho_solve((Lp, True), np.eye(2 * r))
    V = (V + V.T) / 2
    DiM = np.zeros((p + q, 2 * r))
    DiM[:p, :r] = W / theta.sigma_e2
    DiM[p:, r:] = C / theta.sigma_f2
    K = DiM @ V
    logdet = (
        p * np.log(theta.sigma_e2)
        + q * np.log(theta.sigma_f2)
        + np.sum(np.log(det))
        + 2 * np.log(np.diag(Lp)).sum()
    )
    return K, V, DiM, logdet


def _structured_loglik(S: np.ndarray, N: int, p: int, theta: Theta):
    """Log-likelihood from the cross products S; also returns K and V."""
    K, V, DiM, logdet = _structured_regression(theta)
    d = S.shape[0]
    dinv = np.r_[np.full(p, 1 / theta.sigma_e2), np.full(d - p, 1 / theta.sigma_f2)]
    # tr(S Sigma^-1) with Sigma^-1 = D^-1 - D^-1 M V M' D^-1
    trace = float(np.sum(np.diag(S) * dinv) - np.sum((DiM.T @ S @ DiM) * V))
    ll = -0.5 * N * (d * np.log(2 * np.pi) + logdet + trace)
    return ll, K, V


def _structured_pass(S: np.ndarray, N: int, p: int, theta: Theta):
    """Log-likelihood and E-step moments at theta in one structured pass."""
    ll, K, V = _structured_loglik(S, N, p, theta)
    return ll, _assemble_moments(theta, N, p, S, K, V)


def _dense_pass(S: np.ndarray, N: int, p: int, theta: Theta):
    from .model import loglik_from_cross_products

    K, V = _dense_regression(theta)
    return loglik_from_cross_products(S, N, theta), _assemble_moments(theta, N, p, S, K, V)


def e_step(data: DataPair, theta: Theta) -> EStepMoments:
    """Conditional first and second moments of T and U given the data.

    All products with Sigma^-1 go through one Cholesky factorization of the
    joint covariance; no explicit inverse is formed.
    """
    _check_dims(data, theta)
    K, V = _dense_regression(theta)
    r = theta.r
    mu = data.Z @ K
    return _assemble_moments(
        theta, data.N, data.p, data.cross_products(), K, V, muT=mu[:, :r], muU=mu[:, r:]
    )


# -- M-step -----------------------------------------------------------------


def _match_to_identity(V: np.ndarray, lam: np.ndarray):
    """Reorder and sign eigenvector columns so V is as close to I as possible.

    Without this the eigen factorization would permute or flip loading columns
    between iterations, detaching them from their b_k and sigma_t2 entries.
    """
    r = V.shape[0]
    order = np.empty(r, dtype=int)
    free = list(range(r))
    for j in np.argsort(-np.abs(V).max(axis=0), kind="stable"):
        row = max(free, key=lambda i: abs(V[i, j]))
        order[row] = j
        free.remove(row)
    V, lam = V[:, order], lam[order]
    signs = np.sign(np.diag(V))
    signs[signs == 0] = 1.0
    return V * signs, lam


def orthonormal_update(A: np.ndarray, method: Orthogonalization = "symmetric") -> np.ndarray:
    """W = A (L')^-1 with L L' = A'A for the chosen factor L."""
    AtA = A.T @ A
    AtA = (AtA + AtA.T) / 2
    if method == "cholesky":
        L = numerics.cholesky_lower(AtA)
        return scipy.linalg.solve_triangular(L, A.T, lower=True).T
    if method not in ("symmetric", "eigen"):
        raise ValueError(f"unknown orthogonalization {method!r}")
    # the symmetric root does not depend on eigenvector order or sign
    lam, V = numerics.sym_eig(AtA) if method == "eigen" else np.linalg.eigh(AtA)
    if lam.min() <= numerics.PIVOT_TOL * lam.max():
        raise NotPositiveDefinite("A'A is singular; cannot orthonormalize the loading update")
    if method == "eigen":
        V, lam = _match_to_identity(V, lam)
        return A @ (V / np.sqrt(lam))
    return A @ ((V / np.sqrt(lam)) @ V.T)


def m_step(
    data: DataPair,
    moments: EStepMoments,
    config: FitConfig = FitConfig(),
    floor_variances: bool = False,
) -> Theta:
    """One maximization step; the result is orthonormal but not canonicalized.

    The noise variances are evaluated at the updated loadings, i.e.
    sigma_e2 = E||X - T W_new'||^2 / (Np), which is the joint maximizer of
    the f(x | t) factor over (W, sigma_e2).
    """
    N, p, q = data.N, data.p, data.q
    r = moments.r
    if moments.XtMuT.shape != (p, r) or moments.YtMuU.shape != (q, r):
        raise DimensionMismatch("moments do not match the data dimensions")
    W = orthonormal_update(moments.XtMuT, config.orthogonalization)
    C = orthonormal_update(moments.YtMuU, config.orthogonalization)
    Ctt, Cuu, Cut = moments.Ctt, moments.Cuu, moments.Cut

    if config.b_update == "diagonal":
        b = np.diag(Cut) / np.diag(Ctt)
    else:
        b = np.diag(numerics.solve_spd(Ctt, Cut.T).T).copy()
    sigma_t2 = np.diag(Ctt) / N

    ee = moments.trXX - 2 * np.sum(moments.XtMuT * W) + np.trace(W @ Ctt @ W.T)
    ff = moments.trYY - 2 * np.sum(moments.YtMuU * C) + np.trace(C @ Cuu @ C.T)
    hh = np.trace(Cuu) - 2 * np.sum(np.diag(Cut) * b) + np.sum(b**2 * np.diag(Ctt))
    sigma_e2, sigma_f2, sigma_h2 = ee / (N * p), ff / (N * q), hh / (N * r)

    values = {"sigma_t2": sigma_t2, "sigma_e2": sigma_e2, "sigma_f2": sigma_f2, "sigma_h2": sigma_h2}
    for name, v in values.items():
        if np.any(np.asarray(v) <= 0) or not np.all(np.isfinite(v)):
            if not floor_variances:
                raise NegativeVariance(f"{name} update is not positive: {v}")
            warnings.warn(f"{name} update {v} floored at {VARIANCE_FLOOR}", RuntimeWarning)
            values[name] = np.maximum(np.nan_to_num(v, nan=VARIANCE_FLOOR), VARIANCE_FLOOR)

    return Theta(W=W, C=C, b=b, **values)


def q_function(moments: EStepMoments, theta: Theta) -> float:
    """Expected complete-data log-likelihood E[ln f(X,Y,T,U) | X, Y] at `theta`,
    with the expectation taken under ``moments.theta``."""
    N = moments.N
    W, C, b, st = theta.W, theta.C, theta.b, theta.sigma_t2
    p, q, r = theta.dims
    Ctt, Cuu, Cut = moments.Ctt, moments.Cuu, moments.Cut
    ee = moments.trXX - 2 * np.sum(moments.XtMuT * W) + np.trace(W @ Ctt @ W.T)
    ff = moments.trYY - 2 * np.sum(moments.YtMuU * C) + np.trace(C @ Cuu @ C.T)
    hh = np.trace(Cuu) - 2 * np.sum(np.diag(Cut) * b) + np.sum(b**2 * np.diag(Ctt))
    ln2pi = np.log(2 * np.pi)
    return float(
        -0.5 * N * p * (ln2pi + np.log(theta.sigma_e2)) - ee / (2 * theta.sigma_e2)
        - 0.5 * N * q * (ln2pi + np.log(theta.sigma_f2)) - ff / (2 * theta.sigma_f2)
        - 0.5 * N * r * (ln2pi + np.log(theta.sigma_h2)) - hh / (2 * theta.sigma_h2)
        - 0.5 * N * np.sum(ln2pi + np.log(st)) - 0.5 * np.sum(np.diag(Ctt) / st)
    )


# -- driver -----------------------------------------------------------------


def _check_dims(data: DataPair, theta: Theta) -> None:
    p, q, r = theta.dims
    if (data.p, data.q) != (p, q):
        raise DimensionMismatch(f"data has p={data.p}, q={data.q}; theta has p={p}, q={q}")
    if r >= data.N:
        raise DimensionMismatch(f"need r < N (r={r}, N={data.N})")


def _check_rank(data: DataPair, r: int) -> None:
    if not 0 < r < min(data.N, data.p, data.q):
        raise DimensionMismatch(
            f"need 0 < r < min(N, p, q) = {min(data.N, data.p, data.q)}, got r={r}"
        )


def initialize_theta(data: DataPair, r: int, seed: int = 0) -> Theta:
    """Starting values from the SVD of X'Y.

    W and C are the leading singular vectors; sigma_t2 is the variance of the
    X-scores and b_k = d_k / (N sigma_t2_k) with d_k the k-th singular value.
    A nonzero seed rotates the loadings by orthonormalized noise of relative
    size 1e-2.
    """
    _check_rank(data, r)
    X, Y, N = data.X, data.Y, data.N
    U, d, Vt = np.linalg.svd(X.T @ Y, full_matrices=False)
    if np.sum(d > RANK_TOL * d[0]) < r or d[0] == 0:
        raise RankDeficient(f"X'Y has fewer than {r} singular values above {RANK_TOL:g} x max")
    W, C, d = U[:, :r], Vt[:r].T, d[:r]
    signs = numerics.sign_by_largest_entry(W)
    W, C = W * signs, C * signs

    if seed:
        rng = np.random.default_rng(seed)
        W = numerics.gram_schmidt_orthonormalize(W + INIT_PERTURBATION * rng.standard_normal(W.shape) / np.sqrt(W.shape[0]))
        C = numerics.gram_schmidt_orthonormalize(C + INIT_PERTURBATION * rng.standard_normal(C.shape) / np.sqrt(C.shape[0]))

    T, Us = X @ W, Y @ C
    total_x = np.sum(X**2) / (N * data.p)
    total_y = np.sum(Y**2) / (N * data.q)
    sigma_t2 = np.maximum(np.mean(T**2, axis=0), INIT_NOISE_FLOOR * total_x)
    b = np.maximum(d / N / sigma_t2, INIT_NOISE_FLOOR)
    sigma_e2 = max(np.sum((X - T @ W.T) ** 2) / (N * data.p), INIT_NOISE_FLOOR * total_x)
    sigma_f2 = max(np.sum((Y - Us @ C.T) ** 2) / (N * data.q), INIT_NOISE_FLOOR * total_y)
    sigma_h2 = 0.1 * float(np.mean(sigma_t2 * b**2))
    theta = Theta(W=W, C=C, b=b, sigma_t2=sigma_t2, sigma_e2=sigma_e2, sigma_f2=sigma_f2, sigma_h2=sigma_h2)
    return canonicalize_theta(theta).theta


def fit_ppls(
    data: DataPair,
    r: int,
    config: FitConfig = FitConfig(),
    init: Optional[Theta] = None,
) -> FitResult:
    """Maximum-likelihood PPLS fit by EM.

    Iterates until the absolute log-likelihood increment drops below
    ``config.tol`` or ``config.max_iter`` M-steps have been taken. The trace
    holds the log-likelihood of the starting point and of every iterate.
    """
    _check_rank(data, r)
    if not data.is_centered():
        raise ValueError("data must be column-centered (see DataPair.from_raw)")
    theta = initialize_theta(data, r, config.seed) if init is None else init
    _check_dims(data, theta)
    if theta.r != r:
        raise DimensionMismatch(f"initial theta has r={theta.r}, expected {r}")

    S, N, p = data.cross_products(), data.N, data.p
    one_pass = _structured_pass if config.structured else _dense_pass
    floor_from = int(0.9 * config.max_iter)

    ll, moments = one_pass(S, N, p, theta)
    trace = [ll]
    converged = False
    it = 0
    while it < config.max_iter:
        theta = m_step(data, moments, config, floor_variances=it >= floor_from)
        it += 1
        ll, moments = one_pass(S, N, p, theta)
        if not np.isfinite(ll):
            raise NonFiniteLikelihood(f"log-likelihood became {ll} at iteration {it}")
        trace.append(ll)
        if abs(trace[-1] - trace[-2]) < config.tol:
            converged = True
            break
    if not converged:
        log.info("EM stopped at max_iter=%d without meeting tol=%g", config.max_iter, config.tol)

    theta = canonicalize_theta(theta).theta
    return FitResult(
        theta=theta,
        loglik_trace=np.asarray(trace),
        converged=converged,
        iterations=it,
        final_moments=e_step(data, theta),
        config=config,
    )
