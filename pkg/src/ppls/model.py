"""The PPLS parameter set, its implied covariance, likelihood and summaries.

The model for a pair of row vectors (x, y) is::

    x = t W' + e,    y = u C' + f,    u = t B + h

with t ~ N(0, diag(sigma_t2)), isotropic Gaussian noise e, f, h and
orthonormal loadings W (p x r), C (q x r).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import numerics
from .errors import (
    DimensionMismatch,
    NearDegenerateComponents,
    NonSquareCrossBlock,
    ZeroVariance,
)

ORTHONORMAL_TOL = 1e-8
DISTINCT_TOL = 1e-8
THETA_FORMAT = "ppls-theta"
THETA_FORMAT_VERSION = 1


def _frozen(a, ndim: int) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True, ndmin=ndim)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Theta:
    """Full PPLS parameter set.

    ``b`` and ``sigma_t2`` hold the diagonals of B and Sigma_t. Arrays are
    copied and made read-only on construction.
    """

    W: np.ndarray
    C: np.ndarray
    b: np.ndarray
    sigma_t2: np.ndarray
    sigma_e2: float
    sigma_f2: float
    sigma_h2: float

    def __post_init__(self):
        object.__setattr__(self, "W", _frozen(self.W, 2))
        object.__setattr__(self, "C", _frozen(self.C, 2))
        object.__setattr__(self, "b", _frozen(self.b, 1))
        object.__setattr__(self, "sigma_t2", _frozen(self.sigma_t2, 1))
        for name in ("sigma_e2", "sigma_f2", "sigma_h2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        r = self.W.shape[1]
        if self.C.shape[1] != r or self.b.shape != (r,) or self.sigma_t2.shape != (r,):
            raise DimensionMismatch(
                f"inconsistent component count: W {self.W.shape}, C {self.C.shape}, "
                f"b {self.b.shape}, sigma_t2 {self.sigma_t2.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W.shape[0], self.C.shape[0], self.W.shape[1]

    @property
    def r(self) -> int:
        return self.W.shape[1]

    @property
    def component_strength(self) -> np.ndarray:
        """sigma_t2 * b, the quantity that orders components."""
        return self.sigma_t2 * self.b

    @property
    def latent_cov(self) -> np.ndarray:
        """Joint covariance of the latent row (t, u), size 2r x 2r."""
        st, b = self.sigma_t2, self.b
        return np.block(
            [
                [np.diag(st), np.diag(st * b)],
                [np.diag(st * b), np.diag(st * b**2 + self.sigma_h2)],
            ]
        )

    def replace(self, **changes) -> "Theta":
        return replace(self, **changes)

    def allclose(self, other: "Theta", atol: float = 1e-8) -> bool:
        return self.dims == other.dims and all(
            np.allclose(getattr(self, f), getattr(other, f), rtol=0, atol=atol)
            for f in ("W", "C", "b", "sigma_t2", "sigma_e2", "sigma_f2", "sigma_h2")
        )

    def to_dict(self) -> dict:
        p, q, r = self.dims
        return {
            "format": THETA_FORMAT,
            "format_version": THETA_FORMAT_VERSION,
            "dims": {"p": p, "q": q, "r": r},
            "W": self.W.tolist(),
            "C": self.C.tolist(),
            "b": self.b.tolist(),
            "sigma_t2": self.sigma_t2.tolist(),
            "sigma_e2": self.sigma_e2,
            "sigma_f2": self.sigma_f2,
            "sigma_h2": self.sigma_h2,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Theta":
        if doc.get("format") != THETA_FORMAT:
            raise ValueError(f"not a theta document (format={doc.get('format')!r})")
        if doc.get("format_version") != THETA_FORMAT_VERSION:
            raise ValueError(f"unsupported theta format_version {doc.get('format_version')!r}")
        theta = cls(
            W=np.array(doc["W"], dtype=float).reshape(-1, doc["dims"]["r"]),
            C=np.array(doc["C"], dtype=float).reshape(-1, doc["dims"]["r"]),
            b=doc["b"],
            sigma_t2=doc["sigma_t2"],
            sigma_e2=doc["sigma_e2"],
            sigma_f2=doc["sigma_f2"],
            sigma_h2=doc["sigma_h2"],
        )
        d = doc["dims"]
        if theta.dims != (d["p"], d["q"], d["r"]):
            raise DimensionMismatch(f"dims field {d} disagrees with matrices {theta.dims}")
        return theta

    def to_json(self) -> str:
        # json emits repr() floats, which round-trip exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Theta":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class CovarianceBlocks:
    SigmaX: np.ndarray
    SigmaY: np.ndarray
    SigmaXY: np.ndarray
    CovXT: np.ndarray
    CovXU: np.ndarray
    CovYT: np.ndarray
    CovYU: np.ndarray

    @property
    def joint(self) -> np.ndarray:
        """The (p+q) x (p+q) covariance of (x, y)."""
        return np.block([[self.SigmaX, self.SigmaXY], [self.SigmaXY.T, self.SigmaY]])

    @property
    def cov_t(self) -> np.ndarray:
        """cov((x, y), t), (p+q) x r."""
        return np.vstack([self.CovXT, self.CovYT])

    @property
    def cov_u(self) -> np.ndarray:
        return np.vstack([self.CovXU, self.CovYU])


@dataclass(frozen=True, eq=False)
class DataPair:
    """Row-aligned observation matrices X (N x p) and Y (N x q)."""

    X: np.ndarray
    Y: np.ndarray
    centered: bool = False

    def __post_init__(self):
        X = _frozen(self.X, 2)
        Y = _frozen(self.Y, 2)
        if X.shape[0] != Y.shape[0]:
            raise DimensionMismatch(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        if X.shape[0] < 2:
            raise DimensionMismatch("need at least two samples")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("data contain non-finite entries")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)

    @classmethod
    def from_raw(cls, X, Y, center: bool = True, unit_variance: bool = False) -> "DataPair":
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        if center:
            X = X - X.mean(axis=0)
            Y = Y - Y.mean(axis=0)
        if unit_variance:
            for M in (X, Y):
                sd = M.std(axis=0)
                if np.any(sd == 0):
                    raise ZeroVariance("cannot scale a constant column to unit variance")
            X = X / X.std(axis=0)
            Y = Y / Y.std(axis=0)
        return cls(X, Y, centered=center)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Y.shape[1]

    @property
    def Z(self) -> np.ndarray:
        return np.hstack([self.X, self.Y])

    def is_centered(self, tol: float = 1e-10) -> bool:
        Z = self.Z
        sd = Z.std(axis=0)
        return bool(np.all(np.abs(Z.mean(axis=0)) <= tol * np.maximum(sd, 1e-300)))

    def cross_products(self) -> np.ndarray:
        """S = Z'Z / N with Z = (X, Y)."""
        Z = self.Z
        return Z.T @ Z / self.N


class Violation(NamedTuple):
    constraint: str
    discrepancy: float


def validate_theta(theta: Theta, tol: float = ORTHONORMAL_TOL) -> list[Violation]:
    """Check every identifiability constraint; an empty list means valid."""
    p, q, r = theta.dims
    out = []
    if not 0 < r < min(p, q):
        out.append(Violation("0 < r < min(p, q)", float(r)))
    for name, M in (("W'W = I", theta.W), ("C'C = I", theta.C)):
        d = float(np.abs(M.T @ M - np.eye(r)).max())
        if not d <= tol:
            out.append(Violation(name, d))
    if np.any(theta.b <= 0):
        out.append(Violation("b > 0", float(theta.b.min())))
    if np.any(theta.sigma_t2 <= 0):
        out.append(Violation("sigma_t2 > 0", float(theta.sigma_t2.min())))
    steps = np.diff(theta.component_strength)
    if np.any(steps >= 0):
        out.append(Violation("sigma_t2 * b strictly decreasing", float(steps.max())))
    for name in ("sigma_e2", "sigma_f2", "sigma_h2"):
        v = getattr(theta, name)
        if not v > 0:
            out.append(Violation(f"{name} > 0", v))
    return out


def assemble_sigma(theta: Theta) -> CovarianceBlocks:
    W, C, b, st = theta.W, theta.C, theta.b, theta.sigma_t2
    p, q, _ = theta.dims
    var_u = st * b**2 + theta.sigma_h2
    # sum the components in strength order so that permuted copies of theta
    # give bit-identical covariances
    o = np.argsort(-np.abs(st * b), kind="stable")
    return CovarianceBlocks(
        SigmaX=(W[:, o] * st[o]) @ W[:, o].T + theta.sigma_e2 * np.eye(p),
        SigmaY=(C[:, o] * var_u[o]) @ C[:, o].T + theta.sigma_f2 * np.eye(q),
        SigmaXY=(W[:, o] * (st * b)[o]) @ C[:, o].T,
        CovXT=W * st,
        CovXU=W * (st * b),
        CovYT=C * (st * b),
        CovYU=C * var_u,
    )


def log_likelihood(data: DataPair, theta: Theta) -> float:
    """Gaussian log-likelihood of the centered sample, including the 2*pi constant."""
    p, q, r = theta.dims
    if (data.p, data.q) != (p, q):
        raise DimensionMismatch(f"data is {data.p}/{data.q}, theta is {p}/{q}")
    if r >= data.N:
        raise DimensionMismatch(f"need r < N, got r={r}, N={data.N}")
    return loglik_from_cross_products(data.cross_products(), data.N, theta)


def loglik_from_cross_products(S: np.ndarray, N: int, theta: Theta) -> float:
    Sigma = assemble_sigma(theta).joint
    L = numerics.cholesky_lower(Sigma)
    d = Sigma.shape[0]
    logdet = 2.0 * np.log(np.diag(L)).sum()
    # tr(S Sigma^-1) = ||L^-1 S^(1/2)||^2, computed via a triangular solve of S
    Li = np.linalg.solve(L, np.eye(d))
    trace = float(np.sum((Li.T @ Li) * S))
    return -0.5 * N * (d * np.log(2 * np.pi) + logdet + trace)


class Canonical(NamedTuple):
    theta: Theta
    sign_flips: np.ndarray
    permutation: np.ndarray


def canonicalize_theta(theta: Theta, distinct_tol: float = DISTINCT_TOL) -> Canonical:
    """Pick the unique representative of theta's sign/permutation class.

    Components are sorted so sigma_t2 * b decreases, then each (w_k, c_k)
    pair is flipped so the largest-|entry| of w_k is positive. A negative
    b_k is absorbed by flipping c_k, which leaves the covariance unchanged.
    ``sign_flips`` and ``permutation`` describe the joint (w_k, c_k) moves:
    output column k is ``sign_flips[k]`` times input column ``permutation[k]``.
    """
    C = np.array(theta.C)
    b = np.array(theta.b)
    neg = b < 0
    C[:, neg] *= -1
    b[neg] *= -1

    strength = theta.sigma_t2 * b
    scale = np.abs(strength).max()
    srt = np.sort(strength)
    if np.any(np.diff(srt) <= distinct_tol * scale):
        raise NearDegenerateComponents(
            f"component strengths sigma_t2*b are not distinct: {strength.tolist()}"
        )
    perm = np.argsort(-strength, kind="stable")
    W = theta.W[:, perm]
    flips = numerics.sign_by_largest_entry(W)
    out = theta.replace(
        W=W * flips,
        C=C[:, perm] * flips,
        b=b[perm],
        sigma_t2=theta.sigma_t2[perm],
    )
    return Canonical(out, flips, perm)


def variance_explained(data: DataPair, moments) -> tuple[float, float]:
    """Share of ||X||_F^2 and ||Y||_F^2 reproduced by the joint part.

    Uses the conditional latent means from `moments` together with the
    loadings they were computed under (``moments.theta``).
    """
    theta = moments.theta
    ratio_x = np.linalg.norm(moments.muT @ theta.W.T) ** 2 / np.linalg.norm(data.X) ** 2
    ratio_y = np.linalg.norm(moments.muU @ theta.C.T) ** 2 / np.linalg.norm(data.Y) ** 2
    return float(ratio_x), float(ratio_y)


def overlap_fraction(theta: Theta) -> float:
    p, q, _ = theta.dims
    if p != q:
        raise NonSquareCrossBlock(f"overlap needs p == q, got p={p}, q={q}")
    blocks = assemble_sigma(theta)
    return float(np.trace(blocks.SigmaXY) / np.trace(blocks.SigmaY))


def rv_coefficient(X, Y) -> float:
    """RV coefficient between two column-centered blocks with equal row counts."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch("X and Y need the same number of rows")
    Sxx, Syy, Sxy = X.T @ X, Y.T @ Y, X.T @ Y
    denom = np.sqrt(np.sum(Sxx * Sxx) * np.sum(Syy * Syy))
    if denom == 0:
        raise ZeroVariance("RV coefficient undefined for an all-zero block")
    return float(np.sum(Sxy * Sxy) / denom)
