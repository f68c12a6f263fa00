"""Monte Carlo study of the PPLS and PLS loading estimators.

A scenario fixes the dimensions, sample size, noise level and latent
distribution. Each replicate draws a fresh data set from a fixed true
model, fits the requested estimators, aligns their columns to the truth and
accumulates bias, variance and the proportion of correctly ordered
components.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy import stats

from . import numerics
from .em import FitConfig, fit_ppls
from .errors import DimensionMismatch, PPLSError, TooManyFailedReplicates, ZeroVariance
from .model import DataPair, Theta, validate_theta
from .pls import fit_pls

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

DISTRIBUTIONS = ("normal", "student_t2", "poisson1", "binomial")
ESTIMATORS = ("ppls", "pls")
BINOMIAL_TRIALS = 2
BINOMIAL_PROB = 0.25
MAX_FAILURE_FRACTION = 0.05
VARIANCE_PARAMS = ("b", "sigma_t", "sigma_e", "sigma_f", "sigma_h")


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario.

    ``loading_shift`` selects how the bump centers of the true loadings move:
    ``"component"`` shifts them with the component index, ``"entry"`` uses
    the entry index instead, which makes every column identical.
    """

    N: int
    p: int = 20
    q: int = 20
    r: int = 3
    noise_level: float = 0.1
    latent_distribution: str = "normal"
    replicates: int = 200
    base_seed: int = 0
    estimators: tuple = ESTIMATORS
    max_iter: int = 10_000
    tol: float = 1e-6
    orthogonalization: str = "symmetric"
    loading_shift: str = "component"

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not 0 < self.noise_level < 1:
            raise ValueError(f"noise_level must lie in (0, 1), got {self.noise_level}")
        if not (self.N > self.r and self.p > self.r and self.q > self.r and self.r >= 1):
            raise DimensionMismatch("need N, p, q > r >= 1")
        if self.latent_distribution not in DISTRIBUTIONS:
            raise ValueError(f"latent_distribution must be one of {DISTRIBUTIONS}")
        if not self.estimators or not set(self.estimators) <= set(ESTIMATORS):
            raise ValueError(f"estimators must be a non-empty subset of {ESTIMATORS}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.loading_shift not in ("component", "entry"):
            raise ValueError("loading_shift must be 'component' or 'entry'")

    @property
    def fit_config(self) -> FitConfig:
        return FitConfig(max_iter=self.max_iter, tol=self.tol, orthogonalization=self.orthogonalization)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        """Read a scenario from a JSON or TOML file (chosen by extension)."""
        path = Path(path)
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        else:
            doc = json.loads(path.read_text(encoding="utf-8"))
        return cls.from_dict(doc.get("scenario", doc))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d


class TrueModel(NamedTuple):
    theta: Theta
    latent_distribution: str


class Latents(NamedTuple):
    T: np.ndarray
    U: np.ndarray
    E: np.ndarray
    F: np.ndarray
    H: np.ndarray


class Alignment(NamedTuple):
    W: np.ndarray
    C: np.ndarray
    b: Optional[np.ndarray]
    sigma_t2: Optional[np.ndarray]
    sign_flips_w: np.ndarray
    sign_flips_c: np.ndarray
    permutation: np.ndarray
    ordering_correct: bool


# -- truth ------------------------------------------------------------------


def _bumps(n: int, r: int, offset: float, shift: str) -> np.ndarray:
    j = np.arange(1, n + 1, dtype=float)
    k = np.arange(1, r + 1, dtype=float)
    if shift == "component":
        centers = (offset + k[None, :] / 10) * n
    else:
        centers = np.broadcast_to((offset + j[:, None] / 10) * n, (n, r))
    return stats.norm.pdf(j[:, None], loc=centers, scale=math.sqrt(n / 10))


def generate_loadings(p: int, q: int, r: int, shift: str = "component") -> tuple[np.ndarray, np.ndarray]:
    """True loadings: Gaussian bumps per column, then Gram-Schmidt.

    Column k of W (before orthonormalization) is the N((1/2 + k/10) p, p/10)
    density evaluated at 1..p; C uses centers (3/5 + k/10) q.
    """
    if not r < min(p, q):
        raise DimensionMismatch(f"need r < min(p, q), got r={r}, p={p}, q={q}")
    W = numerics.gram_schmidt_orthonormalize(_bumps(p, r, 0.5, shift))
    C = numerics.gram_schmidt_orthonormalize(_bumps(q, r, 0.6, shift))
    return W, C


def make_true_model(config: ScenarioConfig) -> TrueModel:
    """True parameters with noise variances set by the noise level alpha.

    Each noise block carries a fraction alpha of the variance of the block it
    is added to.
    """
    p, q, r, a = config.p, config.q, config.r, config.noise_level
    W, C = generate_loadings(p, q, r, config.loading_shift)
    k = np.arange(r)
    b = np.exp(np.log(1.5) - 3 * k / 10)
    sigma_t2 = np.exp(-k / 10) ** 2
    ratio = a / (1 - a)
    sigma_e2 = ratio * sigma_t2.sum() / p
    sigma_h2 = ratio * np.sum(b**2 * sigma_t2) / r
    sigma_f2 = ratio * (np.sum(b**2 * sigma_t2) + r * sigma_h2) / q
    theta = Theta(W=W, C=C, b=b, sigma_t2=sigma_t2, sigma_e2=sigma_e2, sigma_f2=sigma_f2, sigma_h2=sigma_h2)
    bad = validate_theta(theta)
    if bad:
        raise ValueError(f"true model violates constraints: {bad}")
    return TrueModel(theta, config.latent_distribution)


# -- data -------------------------------------------------------------------


def _draw(rng: np.random.Generator, family: str, shape) -> np.ndarray:
    if family == "normal":
        return rng.standard_normal(shape)
    if family == "student_t2":
        return rng.standard_t(2, shape)
    if family == "poisson1":
        return rng.poisson(1.0, shape).astype(float)
    if family == "binomial":
        return rng.binomial(BINOMIAL_TRIALS, BINOMIAL_PROB, shape).astype(float)
    raise ValueError(f"unknown latent distribution {family!r}")


def standardize_columns(A: np.ndarray) -> np.ndarray:
    """Subtract the sample mean and divide by the sample SD (ddof=1) per column."""
    A = A - A.mean(axis=0)
    sd = A.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise ZeroVariance("a generated latent column is constant")
    return A / sd


def generate_data(model: TrueModel, N: int, seed: int) -> tuple[DataPair, Latents]:
    """Draw N rows from the model.

    T, H, E and F are drawn in that order from one generator, each column is
    standardized empirically and then scaled to its model variance.
    """
    th = model.theta
    p, q, r = th.dims
    rng = np.random.default_rng(seed)
    fam = model.latent_distribution
    T = standardize_columns(_draw(rng, fam, (N, r))) * np.sqrt(th.sigma_t2)
    H = standardize_columns(_draw(rng, fam, (N, r))) * math.sqrt(th.sigma_h2)
    E = standardize_columns(_draw(rng, fam, (N, p))) * math.sqrt(th.sigma_e2)
    F = standardize_columns(_draw(rng, fam, (N, q))) * math.sqrt(th.sigma_f2)
    U = T * th.b + H
    X = T @ th.W.T + E
    Y = U @ th.C.T + F
    return DataPair.from_raw(X, Y, center=True), Latents(T, U, E, F, H)


# -- alignment --------------------------------------------------------------


def align_estimates(estimate, truth) -> Alignment:
    """Match estimated columns to the true ones and fix their signs.

    Truth columns are visited in order; each takes the unused estimated
    column with the largest absolute inner product with its W column. W and
    C columns are then flipped separately so their inner products with the
    truth are non-negative. ``estimate`` needs ``W`` and ``C`` attributes;
    ``b`` and ``sigma_t2`` are permuted when present.
    """
    truth = truth.theta if isinstance(truth, TrueModel) else truth
    W, C = np.asarray(estimate.W), np.asarray(estimate.C)
    if W.shape != truth.W.shape or C.shape != truth.C.shape:
        raise DimensionMismatch(f"estimate {W.shape}/{C.shape} vs truth {truth.W.shape}/{truth.C.shape}")
    r = W.shape[1]
    inner = np.abs(truth.W.T @ W)
    perm = np.empty(r, dtype=int)
    free = np.ones(r, dtype=bool)
    for k in range(r):
        j = int(np.argmax(np.where(free, inner[k], -np.inf)))
        perm[k] = j
        free[j] = False
    W, C = W[:, perm], C[:, perm]
    sw = np.where(np.sum(truth.W * W, axis=0) < 0, -1.0, 1.0)
    sc = np.where(np.sum(truth.C * C, axis=0) < 0, -1.0, 1.0)
    b = getattr(estimate, "b", None)
    st = getattr(estimate, "sigma_t2", None)
    return Alignment(
        W=W * sw,
        C=C * sc,
        b=None if b is None else np.asarray(b)[perm],
        sigma_t2=None if st is None else np.asarray(st)[perm],
        sign_flips_w=sw,
        sign_flips_c=sc,
        permutation=perm,
        ordering_correct=bool(np.array_equal(perm, np.arange(r))),
    )


# -- scenario ---------------------------------------------------------------


@dataclass
class EstimatorSummary:
    """Per-estimator results over the successful replicates."""

    W: np.ndarray  # replicates x p x r, aligned
    C: np.ndarray
    ordering_correct: np.ndarray
    bias_W: np.ndarray
    bias_C: np.ndarray
    variance_W: Optional[np.ndarray]
    variance_C: Optional[np.ndarray]
    params: dict = field(default_factory=dict)  # name -> replicates x len
    param_relative_bias: dict = field(default_factory=dict)
    param_relative_variance: dict = field(default_factory=dict)
    nonconverged: int = 0

    @property
    def ordering_proportion(self) -> float:
        return float(np.mean(self.ordering_correct))


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    truth: Theta
    estimators: dict
    failures: list

    def ordering_proportion(self, estimator: str = "ppls") -> float:
        return self.estimators[estimator].ordering_proportion


def _true_params(th: Theta) -> dict:
    return {
        "b": th.b,
        "sigma_t": np.sqrt(th.sigma_t2),
        "sigma_e": np.array([math.sqrt(th.sigma_e2)]),
        "sigma_f": np.array([math.sqrt(th.sigma_f2)]),
        "sigma_h": np.array([math.sqrt(th.sigma_h2)]),
    }


def _run_replicate(config: ScenarioConfig, model: TrueModel, rep: int) -> dict:
    try:
        data, _ = generate_data(model, config.N, config.base_seed + rep)
    except PPLSError as exc:
        return {est: exc for est in config.estimators}
    out = {}
    for est in config.estimators:
        try:
            if est == "ppls":
                fit = fit_ppls(data, config.r, config.fit_config)
                a = align_estimates(fit.theta, model)
                th = fit.theta
                params = {
                    "b": a.b,
                    "sigma_t": np.sqrt(a.sigma_t2),
                    "sigma_e": np.array([math.sqrt(th.sigma_e2)]),
                    "sigma_f": np.array([math.sqrt(th.sigma_f2)]),
                    "sigma_h": np.array([math.sqrt(th.sigma_h2)]),
                }
                out[est] = (a.W, a.C, a.ordering_correct, params, fit.converged)
            else:
                a = align_estimates(fit_pls(data, config.r), model)
                out[est] = (a.W, a.C, a.ordering_correct, None, True)
        except (PPLSError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[est] = exc
    return out


def _summarize(records: list, truth: Theta, with_params: bool) -> EstimatorSummary:
    W = np.array([r[0] for r in records])
    C = np.array([r[1] for r in records])
    n = len(records)
    var = (lambda A: A.var(axis=0, ddof=1)) if n > 1 else (lambda A: None)
    s = EstimatorSummary(
        W=W,
        C=C,
        ordering_correct=np.array([r[2] for r in records]),
        bias_W=W.mean(axis=0) - truth.W,
        bias_C=C.mean(axis=0) - truth.C,
        variance_W=var(W),
        variance_C=var(C),
        nonconverged=sum(not r[4] for r in records),
    )
    if with_params:
        for name, true in _true_params(truth).items():
            vals = np.array([r[3][name] for r in records])
            s.params[name] = vals
            s.param_relative_bias[name] = (vals.mean(axis=0) - true) / true
            v = var(vals)
            s.param_relative_variance[name] = None if v is None else v / true**2
    return s


def run_scenario(config: ScenarioConfig, workers: int = 1) -> ScenarioResult:
    """Run every replicate of a scenario and aggregate in replicate order.

    Replicate b uses seed ``base_seed + b``, so results do not depend on
    ``workers``. Fits that stop at ``max_iter`` are kept and counted in
    ``nonconverged``; fits that raise are recorded in ``failures`` and the
    scenario raises TooManyFailedReplicates when more than 5% of the
    replicates fail for some estimator.
    """
    model = make_true_model(config)
    reps = range(config.replicates)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_replicate, [config] * len(reps), [model] * len(reps), reps, chunksize=4))
    else:
        outs = [_run_replicate(config, model, b) for b in reps]

    summaries, failures = {}, []
    for est in config.estimators:
        ok = []
        for b, out in enumerate(outs):
            if isinstance(out[est], Exception):
                failures.append({"replicate": b, "estimator": est, "error": f"{type(out[est]).__name__}: {out[est]}"})
            else:
                ok.append(out[est])
        n_fail = config.replicates - len(ok)
        if n_fail > MAX_FAILURE_FRACTION * config.replicates or not ok:
            raise TooManyFailedReplicates(f"{est}: {n_fail} of {config.replicates} replicates failed")
        summaries[est] = _summarize(ok, model.theta, with_params=est == "ppls")
    for f in failures:
        log.warning("replicate %(replicate)d (%(estimator)s) failed: %(error)s", f)
    return ScenarioResult(config=config, truth=model.theta, estimators=summaries, failures=failures)


# -- output -----------------------------------------------------------------

TIDY_HEADER = ("estimator", "matrix", "row", "component", "statistic", "value")


def _fmt(x) -> str:
    return "null" if x is None else repr(float(x))


def _matrix_rows(est, name, stat, M, shape):
    p, r = shape
    for i in range(p):
        for k in range(r):
            yield (est, name, i + 1, k + 1, stat, _fmt(None if M is None else M[i, k]))


def _param_rows(est, stat, values: dict, truth: Theta):
    for name in VARIANCE_PARAMS:
        v = values.get(name)
        n = truth.r if name in ("b", "sigma_t") else 1
        for k in range(n):
            yield (est, name, 1, k + 1 if n > 1 else "", stat, _fmt(None if v is None else v[k]))


def write_tables(result: ScenarioResult, outdir) -> dict:
    """Write bias.csv, variance.csv and ordering.json; return their paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    th = result.truth
    bias_rows, var_rows = [], []
    for est, s in result.estimators.items():
        bias_rows += _matrix_rows(est, "W", "bias", s.bias_W, th.W.shape)
        bias_rows += _matrix_rows(est, "C", "bias", s.bias_C, th.C.shape)
        var_rows += _matrix_rows(est, "W", "variance", s.variance_W, th.W.shape)
        var_rows += _matrix_rows(est, "C", "variance", s.variance_C, th.C.shape)
        if s.param_relative_bias:
            bias_rows += _param_rows(est, "relative_bias", s.param_relative_bias, th)
            var_rows += _param_rows(est, "relative_variance", s.param_relative_variance, th)
    paths = {"bias": outdir / "bias.csv", "variance": outdir / "variance.csv", "ordering": outdir / "ordering.json"}
    for key, rows in (("bias", bias_rows), ("variance", var_rows)):
        with open(paths[key], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIDY_HEADER)
            w.writerows(rows)
    ordering = {
        "schema_version": 1,
        "replicates": result.config.replicates,
        "estimators": {
            est: {
                # W and C share one permutation, so one proportion covers both
                "proportion": s.ordering_proportion,
                "correct": int(s.ordering_correct.sum()),
                "successful_replicates": int(len(s.ordering_correct)),
                "nonconverged": s.nonconverged,
            }
            for est, s in result.estimators.items()
        },
        "failures": result.failures,
    }
    paths["ordering"].write_text(json.dumps(ordering, indent=2) + "\n", encoding="utf-8")
    return paths
