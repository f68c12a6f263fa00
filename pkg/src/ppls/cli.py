"""Command-line interface: ``ppls fit``, ``ppls se`` and ``ppls simulate``.

Exit codes: 0 success, 1 malformed input, 2 dimension mismatch, 3 EM stopped
at the iteration limit, 4 numerical failure (including a degenerate
information matrix), 5 too many failed replicates.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .em import FitConfig, FitResult, _structured_pass, e_step, fit_ppls, m_step
from .errors import DimensionMismatch, PPLSError, TooManyFailedReplicates
from .inference import asymptotic_se, bootstrap_se
from .model import DataPair, Theta, overlap_fraction, rv_coefficient, variance_explained
from .simulation import ScenarioConfig, run_scenario, write_tables

EXIT_OK, EXIT_MALFORMED, EXIT_DIMENSION, EXIT_MAXITER, EXIT_NUMERIC, EXIT_REPLICATES = range(6)
SCHEMA_VERSION = 1
STATIONARY_TOL = 1e-3


class MalformedInput(Exception):
    pass


# -- I/O helpers ------------------------------------------------------------


def read_matrix(path) -> tuple[list, np.ndarray]:
    """Read a numeric CSV with one header row; return (header, matrix)."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise MalformedInput(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise MalformedInput(f"{path}: empty file, a header row is required") from None
        except (csv.Error, UnicodeDecodeError) as exc:
            raise MalformedInput(f"{path}: line 1: {exc}") from None
        data = []
        try:
            for row in rows:
                line = rows.line_num
                if not row:
                    continue
                if len(row) != len(header):
                    raise MalformedInput(f"{path}: line {line}: expected {len(header)} fields, found {len(row)}")
                vals = []
                for j, cell in enumerate(row):
                    try:
                        v = float(cell)
                    except ValueError:
                        v = math.nan
                    if not math.isfinite(v):
                        raise MalformedInput(
                            f"{path}: line {line}, column {j + 1} ({header[j]!r}): non-numeric value {cell!r}"
                        )
                    vals.append(v)
                data.append(vals)
        except (csv.Error, UnicodeDecodeError) as exc:
            raise MalformedInput(f"{path}: line {rows.line_num}: {exc}") from None
    if not data:
        raise MalformedInput(f"{path}: no data rows")
    return header, np.array(data, dtype=float)


def write_matrix(path, M: np.ndarray, header=None) -> None:
    """Write a matrix as CSV with 17 significant digits (exact round trip)."""
    M = np.atleast_2d(M)
    header = header or [f"V{j + 1}" for j in range(M.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[f"{v:.17g}" for v in row] for row in M])


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(outdir: Path, command: str, args, inputs: list, outputs: list, started: str, extra=None) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "argv": sys.argv[1:],
        "configuration": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        "versions": {
            "ppls": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "started": started,
        "finished": _now(),
    }
    if extra:
        doc.update(extra)
    _write_json(outdir / "manifest.json", doc)


def _load_data(args) -> DataPair:
    _, X = read_matrix(args.x_csv)
    _, Y = read_matrix(args.y_csv)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"{args.x_csv} has {X.shape[0]} rows but {args.y_csv} has {Y.shape[0]}")
    return DataPair.from_raw(X, Y, center=not args.no_center, unit_variance=args.unit_variance)


def _fit_config(args) -> FitConfig:
    return FitConfig(max_iter=args.max_iter, tol=args.tol, orthogonalization=args.orthogonalization, seed=args.seed)


# -- commands ---------------------------------------------------------------


def cmd_fit(args) -> int:
    started = _now()
    data = _load_data(args)
    r = args.r
    if not r < min(data.p, data.q):
        raise DimensionMismatch(f"the number of components must satisfy r < min(p, q) = {min(data.p, data.q)}, got r={r}")
    fit = fit_ppls(data, r, _fit_config(args))
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    doc = fit.theta.to_dict()
    doc["schema_version"] = SCHEMA_VERSION
    _write_json(out / "theta.json", doc)
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loglik"])
        w.writerows([[i, f"{ll:.17g}"] for i, ll in enumerate(fit.loglik_trace)])
    vx, vy = variance_explained(data, fit.final_moments)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "loglik": fit.loglik,
        "variance_explained": {"X": vx, "Y": vy},
        "overlap_fraction": overlap_fraction(fit.theta) if data.p == data.q else None,
        "rv_coefficient": rv_coefficient(data.X, data.Y),
        "component_strength": fit.theta.component_strength.tolist(),
    }
    _write_json(out / "summary.json", summary)
    outputs = [out / n for n in ("theta.json", "trace.csv", "summary.json")]
    _write_manifest(out, "fit", args, [args.x_csv, args.y_csv], outputs, started)
    if not fit.converged:
        print(f"warning: EM stopped at max_iter={args.max_iter} before reaching tol={args.tol:g}", file=sys.stderr)
        return EXIT_MAXITER
    return EXIT_OK


def _load_theta(path) -> Theta:
    try:
        return Theta.from_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, DimensionMismatch):
            raise
        raise MalformedInput(f"{path}: not a valid theta document ({exc})") from None


def cmd_se(args) -> int:
    started = _now()
    data = _load_data(args)
    theta = _load_theta(args.theta_json)
    p, q, r = theta.dims
    if (data.p, data.q) != (p, q):
        raise DimensionMismatch(f"theta has p={p}, q={q} but the data have p={data.p}, q={data.q}")
    cfg = _fit_config(args)
    if args.method == "asymptotic":
        S = data.cross_products()
        ll0, moments = _structured_pass(S, data.N, data.p, theta)
        ll1, _ = _structured_pass(S, data.N, data.p, m_step(data, moments, cfg))
        if abs(ll1 - ll0) > STATIONARY_TOL:
            print(f"warning: one EM step changes the log-likelihood by {ll1 - ll0:.3g}; "
                  "theta is not a likelihood maximum for these data", file=sys.stderr)
        fit = FitResult(theta, np.array([ll0]), True, 0, e_step(data, theta), cfg)
        res = asymptotic_se(data, fit, information=args.information)
    else:
        res = bootstrap_se(data, r, cfg, args.replicates, args.seed, reference=theta, workers=args.threads)

    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    c_note = res.metadata.get("C", "") if res.method == "asymptotic" else ""
    with open(out / "se.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["matrix", "row", "component", "se", "method", "degenerate", "note"])
        for name, se, deg, note in (("W", res.seW, res.degenerate_W, ""), ("C", res.seC, res.degenerate_C, c_note)):
            for i in range(se.shape[0]):
                for k in range(r):
                    w.writerow([name, i + 1, k + 1, f"{se[i, k]:.17g}", res.method, str(bool(deg[k])).lower(), note])
    meta = {"method": res.method, "bootstrap_replicates": res.bootstrap_replicates,
            "failed_replicates": res.failed_replicates, **res.metadata}
    _write_manifest(out, "se", args, [args.x_csv, args.y_csv, args.theta_json], [out / "se.csv"], started,
                    {"se_metadata": meta})
    if np.any(res.degenerate_W) or np.any(res.degenerate_C):
        print("warning: observed information is not positive definite; "
              "standard errors come from a pseudo-inverse", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = _now()
    try:
        config = ScenarioConfig.load(args.config)
    except (OSError, ValueError, TypeError) as exc:
        if isinstance(exc, DimensionMismatch):
            raise
        raise MalformedInput(f"{args.config}: invalid scenario ({exc})") from None
    if args.seed is not None:
        config = ScenarioConfig.from_dict({**config.to_dict(), "base_seed": args.seed})
    result = run_scenario(config, workers=args.threads)
    out = Path(args.outdir)
    paths = write_tables(result, out)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "scenario": config.to_dict(),
        "ordering_proportion": {e: s.ordering_proportion for e, s in result.estimators.items()},
        "nonconverged": {e: s.nonconverged for e, s in result.estimators.items()},
        "failures": result.failures,
    }
    _write_json(out / "summary.json", summary)
    outputs = [paths["bias"], paths["variance"], paths["ordering"], out / "summary.json"]
    _write_manifest(out, "simulate", args, [args.config], outputs, started,
                    {"resolved_scenario": config.to_dict()})
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppls", description="Probabilistic partial least squares.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("x_csv", type=Path, help="CSV for X with one header row")
        p.add_argument("y_csv", type=Path, help="CSV for Y with one header row, same row order")
        p.add_argument("--no-center", action="store_true", help="use the data as given (must already be centered)")
        p.add_argument("--unit-variance", action="store_true", help="scale every column to unit variance")
        p.add_argument("--max-iter", type=_positive_int, default=10_000)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--orthogonalization", choices=("symmetric", "cholesky", "eigen"), default="symmetric")
        p.add_argument("-o", "--outdir", type=Path, default=Path("."))

    f = sub.add_parser("fit", help="fit a PPLS model")
    data_args(f)
    f.add_argument("-r", type=_positive_int, required=True, help="number of components")
    f.add_argument("--seed", type=int, default=0, help="perturbs the SVD start when nonzero")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("se", help="standard errors of the loadings")
    data_args(s)
    s.add_argument("theta_json", type=Path)
    s.add_argument("--method", choices=("asymptotic", "bootstrap"), default="asymptotic")
    s.add_argument("--information", choices=("joint", "component"), default="joint")
    s.add_argument("--replicates", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0, help="bootstrap base seed")
    s.add_argument("--threads", type=_positive_int, default=1)
    s.set_defaults(func=cmd_se)

    m = sub.add_parser("simulate", help="run a simulation scenario")
    m.add_argument("config", type=Path, help="scenario as JSON or TOML")
    m.add_argument("-o", "--outdir", type=Path, default=Path("."))
    m.add_argument("--seed", type=int, default=None, help="overrides base_seed in the config")
    m.add_argument("--threads", type=_positive_int, default=1)
    m.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except MalformedInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except DimensionMismatch as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except TooManyFailedReplicates as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REPLICATES
    except (PPLSError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
