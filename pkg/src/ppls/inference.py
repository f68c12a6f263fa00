"""Standard errors for the PPLS loadings.

Two asymptotic routes are offered.

``information="joint"`` (default) inverts the observed information of all
parameters at once. The loadings are parametrized locally on the manifold
of orthonormal matrices, W(A, K) = polar(W + W_perp A + W K) with K skew,
and the negative Hessian of the observed log-likelihood is taken by central
differences in these coordinates together with b, sigma_t2 and the noise
variances.

``information="component"`` applies Louis' identity to one column w_k at a
time, holding every other parameter fixed and treating w_k as a free
p-vector: I = E(B | X, Y) - Cov(S | X, Y), with the score S of the
complete-data log-likelihood in w_k. Ignoring the uncertainty in the other
parameters makes these errors noticeably too small.

The bootstrap resamples rows, refits and aligns each refit to the base fit.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Optional

import numpy as np
import scipy.linalg

from .em import FitConfig, FitResult, _structured_loglik, e_step, fit_ppls
from .errors import ComponentOutOfRange, DimensionMismatch, PPLSError, TooManyFailedReplicates
from .model import DataPair, Theta

Information = Literal["joint", "component"]
HESSIAN_STEP = 1e-3
PD_TOL = 1e-10
MAX_BOOTSTRAP_FAILURE = 0.10


class ColumnSE(NamedTuple):
    se: np.ndarray
    info: np.ndarray
    degenerate: bool


@dataclass(frozen=True, eq=False)
class LoadingSE:
    """Entrywise standard errors for W (p x r) and C (q x r)."""

    seW: np.ndarray
    seC: np.ndarray
    method: str
    bootstrap_replicates: int = 0
    degenerate_W: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    degenerate_C: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    failed_replicates: int = 0
    metadata: dict = field(default_factory=dict)


# -- joint observed information ---------------------------------------------


@dataclass(frozen=True, eq=False)
class JointInformation:
    """Observed information in local coordinates and the implied covariances.

    ``cov_W`` is the covariance of vec(W) in row-major order (entry (j, k)
    at index j*r + k); it has rank p*r - r(r+1)/2 because W stays
    orthonormal.
    """

    information: np.ndarray
    labels: list
    cov: np.ndarray
    cov_W: np.ndarray
    cov_C: np.ndarray
    degenerate: bool


class _Chart:
    """Local coordinates around a fitted theta."""

    def __init__(self, theta: Theta):
        self.theta = theta
        p, q, r = theta.dims
        self.r = r
        self.iu = np.triu_indices(r, 1)
        nk = len(self.iu[0])
        self.Wp = scipy.linalg.null_space(theta.W.T)
        self.Cp = scipy.linalg.null_space(theta.C.T)
        sizes = [("W_perp", (p - r) * r), ("W_skew", nk), ("C_perp", (q - r) * r), ("C_skew", nk),
                 ("b", r), ("sigma_t2", r), ("sigma_e2", 1), ("sigma_f2", 1), ("sigma_h2", 1)]
        self.labels = [f"{name}[{i}]" for name, n in sizes for i in range(n)]
        self.offsets = np.cumsum([0] + [n for _, n in sizes])
        self.n = int(self.offsets[-1])
        th = theta
        self.scale = np.r_[
            np.ones(self.offsets[4]), th.b, th.sigma_t2, th.sigma_e2, th.sigma_f2, th.sigma_h2
        ]

    def _block(self, v, i):
        return v[self.offsets[i]:self.offsets[i + 1]]

    def tangent(self, A, kv, M, Mp):
        K = np.zeros((self.r, self.r))
        K[self.iu] = kv
        return Mp @ A.reshape(-1, self.r) + M @ (K - K.T)

    @staticmethod
    def _polar(E):
        lam, V = np.linalg.eigh(E.T @ E)
        return E @ ((V / np.sqrt(lam)) @ V.T)

    def theta_at(self, v) -> Theta:
        th, blk = self.theta, self._block
        W = self._polar(th.W + self.tangent(blk(v, 0), blk(v, 1), th.W, self.Wp))
        C = self._polar(th.C + self.tangent(blk(v, 2), blk(v, 3), th.C, self.Cp))
        return Theta(
            W=W, C=C, b=th.b + blk(v, 4), sigma_t2=th.sigma_t2 + blk(v, 5),
            sigma_e2=th.sigma_e2 + v[-3], sigma_f2=th.sigma_f2 + v[-2], sigma_h2=th.sigma_h2 + v[-1],
        )

    def loading_jacobian(self, which: str) -> np.ndarray:
        """d vec(W) / d(local W coordinates) at the origin (linear map)."""
        th = self.theta
        i0, M, Mp = (0, th.W, self.Wp) if which == "W" else (2, th.C, self.Cp)
        lo, hi = self.offsets[i0], self.offsets[i0 + 2]
        J = np.zeros((M.size, hi - lo))
        for j in range(hi - lo):
            v = np.zeros(self.n)
            v[lo + j] = 1.0
            J[:, j] = self.tangent(self._block(v, i0), self._block(v, i0 + 1), M, Mp).ravel()
        return J, slice(lo, hi)


def _hessian(f, n: int, h: np.ndarray) -> np.ndarray:
    f0 = f(np.zeros(n))
    H = np.zeros((n, n))
    E = np.diag(h)
    for i in range(n):
        H[i, i] = (f(2 * E[i]) - 2 * f0 + f(-2 * E[i])) / (4 * h[i] ** 2)
        for j in range(i + 1, n):
            H[i, j] = H[j, i] = (
                f(E[i] + E[j]) - f(E[i] - E[j]) - f(E[j] - E[i]) + f(-E[i] - E[j])
            ) / (4 * h[i] * h[j])
    return H


def observed_information(data: DataPair, theta: Theta, step: float = HESSIAN_STEP) -> JointInformation:
    """Negative Hessian of the observed log-likelihood at ``theta``.

    Step sizes are ``step`` in the loading coordinates and ``step`` times the
    current value for b and the variances. Meaningful only at a stationary
    point of the likelihood.
    """
    p, q, r = theta.dims
    if (data.p, data.q) != (p, q):
        raise DimensionMismatch(f"data has p={data.p}, q={data.q}; theta has p={p}, q={q}")
    chart = _Chart(theta)
    S, N = data.cross_products(), data.N

    def loglik(v):
        return _structured_loglik(S, N, p, chart.theta_at(v))[0]

    info = -_hessian(loglik, chart.n, step * np.abs(chart.scale))
    info = (info + info.T) / 2
    lam = np.linalg.eigvalsh(info)
    degenerate = bool(lam.min() <= PD_TOL * lam.max())
    if degenerate:
        warnings.warn("observed information is not positive definite; using the pseudo-inverse", RuntimeWarning)
        cov = np.linalg.pinv(info, hermitian=True)
    else:
        cov = scipy.linalg.cho_solve(scipy.linalg.cho_factor(info), np.eye(chart.n))
    covs = {}
    for which in ("W", "C"):
        J, sl = chart.loading_jacobian(which)
        covs[which] = J @ cov[sl, sl] @ J.T
    return JointInformation(info, chart.labels, cov, covs["W"], covs["C"], degenerate)


def _column_from_joint(cov_vec: np.ndarray, n: int, r: int, k: int) -> ColumnSE:
    idx = np.arange(n) * r + k
    ck = cov_vec[np.ix_(idx, idx)]
    se = np.sqrt(np.clip(np.diag(ck), 0, None))
    return ColumnSE(se, np.linalg.pinv(ck, hermitian=True), False)


# -- per-column Louis information ------------------------------------------


def louis_information(X: np.ndarray, W: np.ndarray, M: np.ndarray, V: np.ndarray, noise_var: float, k: int) -> np.ndarray:
    """Observed information for column k of W with everything else fixed.

    ``M`` (N x r) holds E(t_i | x_i, y_i) and ``V`` (r x r) the conditional
    covariance, identical for every row. The complete-data score for row i
    is s_i = (x_i t_ik - W g_i) / noise_var with g_ij = t_ij t_ik; its
    conditional covariance follows from the Gaussian fourth-moment identity.
    """
    N, p = X.shape
    mk, Vkk, vk = M[:, k], V[k, k], V[:, k]
    EB = (np.sum(mk**2) + N * Vkk) / noise_var * np.eye(p)
    # Cov(t_ik, g_ij) summed against x_i
    ctg = mk[:, None] * vk[None, :] + M * Vkk
    Xc = X.T @ ctg
    sM, smk, smk2 = M.T @ M, M.T @ mk, np.sum(mk**2)
    # sum_i Cov(g_i)
    Cg = sM * Vkk + np.outer(smk, vk) + np.outer(vk, smk) + smk2 * V + N * (V * Vkk + np.outer(vk, vk))
    covS = Vkk * (X.T @ X) - Xc @ W.T - W @ Xc.T + W @ Cg @ W.T
    info = EB - covS / noise_var**2
    return (info + info.T) / 2


def _invert_info(info: np.ndarray) -> ColumnSE:
    lam = np.linalg.eigvalsh(info)
    if lam.min() > PD_TOL * max(lam.max(), 0):
        cov = scipy.linalg.cho_solve(scipy.linalg.cho_factor(info), np.eye(len(info)))
        return ColumnSE(np.sqrt(np.diag(cov)), info, False)
    warnings.warn("observed information is not positive definite; using the pseudo-inverse", RuntimeWarning)
    cov = np.linalg.pinv(info, hermitian=True)
    return ColumnSE(np.sqrt(np.abs(np.diag(cov))), info, True)


# -- public asymptotic API --------------------------------------------------


def _check_component(fit: FitResult, k: int) -> None:
    r = fit.theta.r
    if not 1 <= k <= r:
        raise ComponentOutOfRange(f"component index must be in 1..{r}, got {k}")
    if not fit.converged:
        warnings.warn("fit did not converge; asymptotic standard errors may be meaningless", RuntimeWarning)


def _moments(data: DataPair, fit: FitResult):
    m = fit.final_moments
    if m is None or m.muT is None:
        m = e_step(data, fit.theta)
    return m


def _column_se(data, fit, k, information, block):
    _check_component(fit, k)
    th = fit.theta
    if information == "joint":
        ji = observed_information(data, th)
        cov, n = (ji.cov_W, th.W.shape[0]) if block == "W" else (ji.cov_C, th.C.shape[0])
        out = _column_from_joint(cov, n, th.r, k - 1)
        return out._replace(degenerate=ji.degenerate)
    if information != "component":
        raise ValueError(f"information must be 'joint' or 'component', got {information!r}")
    m = _moments(data, fit)
    r = th.r
    if block == "W":
        info = louis_information(data.X, th.W, m.muT, m.cond_cov[:r, :r], th.sigma_e2, k - 1)
    else:
        info = louis_information(data.Y, th.C, m.muU, m.cond_cov[r:, r:], th.sigma_f2, k - 1)
    return _invert_info(info)


def asymptotic_se_w(data: DataPair, fit: FitResult, k: int, information: Information = "joint") -> ColumnSE:
    """Standard errors of column k (1-based) of W."""
    return _column_se(data, fit, k, information, "W")


def asymptotic_se_c(data: DataPair, fit: FitResult, k: int, information: Information = "joint") -> ColumnSE:
    """Standard errors of column k (1-based) of C, mirroring the W computation."""
    return _column_se(data, fit, k, information, "C")


def asymptotic_se(data: DataPair, fit: FitResult, information: Information = "joint") -> LoadingSE:
    """Asymptotic standard errors for every entry of W and C."""
    th = fit.theta
    p, q, r = th.dims
    if information == "joint":
        if not fit.converged:
            warnings.warn("fit did not converge; asymptotic standard errors may be meaningless", RuntimeWarning)
        ji = observed_information(data, th)
        seW = np.column_stack([_column_from_joint(ji.cov_W, p, r, k).se for k in range(r)])
        seC = np.column_stack([_column_from_joint(ji.cov_C, q, r, k).se for k in range(r)])
        degW = degC = np.full(r, ji.degenerate)
        meta = {"information": "joint", "C": "same joint information as W"}
    else:
        cw = [asymptotic_se_w(data, fit, k, "component") for k in range(1, r + 1)]
        cc = [asymptotic_se_c(data, fit, k, "component") for k in range(1, r + 1)]
        seW = np.column_stack([c.se for c in cw])
        seC = np.column_stack([c.se for c in cc])
        degW = np.array([c.degenerate for c in cw])
        degC = np.array([c.degenerate for c in cc])
        meta = {"information": "component", "C": "symmetry extrapolation of the W derivation"}
    return LoadingSE(seW=seW, seC=seC, method="asymptotic", degenerate_W=degW, degenerate_C=degC, metadata=meta)


# -- bootstrap --------------------------------------------------------------


def _bootstrap_replicate(data: DataPair, r: int, config: FitConfig, reference: Theta, seed: int):
    from .simulation import align_estimates

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.N, data.N)
    boot = DataPair.from_raw(data.X[idx], data.Y[idx], center=True)
    try:
        fit = fit_ppls(boot, r, config)
    except (PPLSError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return f"{type(exc).__name__}: {exc}"
    if not fit.converged:
        return "not converged"
    a = align_estimates(fit.theta, reference)
    return a.W, a.C


def bootstrap_se(
    data: DataPair,
    r: int,
    config: FitConfig = FitConfig(),
    replicates: int = 1000,
    base_seed: int = 0,
    reference: Optional[Theta] = None,
    workers: int = 1,
) -> LoadingSE:
    """Row-resampling bootstrap standard errors for W and C.

    Replicate b resamples with ``default_rng(base_seed + b)``, re-centers,
    refits from the default start and aligns to ``reference`` (the fit to
    the full data unless given). Replicates that raise or stop at
    ``max_iter`` are dropped; more than 10% of them raises
    TooManyFailedReplicates.
    """
    if replicates < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if reference is None:
        reference = fit_ppls(data, r, config).theta
    seeds = [base_seed + b for b in range(replicates)]
    if workers > 1:
        n = len(seeds)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_bootstrap_replicate, [data] * n, [r] * n, [config] * n, [reference] * n, seeds, chunksize=4))
    else:
        outs = [_bootstrap_replicate(data, r, config, reference, s) for s in seeds]
    ok = [o for o in outs if not isinstance(o, str)]
    failed = replicates - len(ok)
    if failed > MAX_BOOTSTRAP_FAILURE * replicates or len(ok) < 2:
        raise TooManyFailedReplicates(f"{failed} of {replicates} bootstrap replicates failed")
    Ws = np.array([o[0] for o in ok])
    Cs = np.array([o[1] for o in ok])
    return LoadingSE(
        seW=Ws.std(axis=0, ddof=1),
        seC=Cs.std(axis=0, ddof=1),
        method="bootstrap",
        bootstrap_replicates=len(ok),
        degenerate_W=np.zeros(r, dtype=bool),
        degenerate_C=np.zeros(r, dtype=bool),
        failed_replicates=failed,
        metadata={"base_seed": base_seed, "requested_replicates": replicates},
    )
