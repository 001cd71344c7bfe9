"""Command-line entry point: ``robust-funreg {fpca,regress,test,predict,simulate}``.

Every flag can also be given in a JSON file passed with ``--config``; keys
are the flag names with dashes replaced by underscores. Command-line flags
override the file. All outputs are pure functions of the inputs, flags and
seed, with numbers written to 17 significant digits.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import DataError, LongitudinalSample, pair_by_id, read_long_csv
from .fpca import FitError, FitOptions, ReducedRankModel, ScoreSet, fit_reduced_rank, predict_scores, select_rank
from .inference import InferenceError, analytic_test, bootstrap_covariance, permutation_test
from .regression import (
    GmtConfig,
    GmtFit,
    RegressionError,
    WeightScheme,
    fit_estimator,
    predict_response,
    slope_surface,
)
from .report import write_csv, write_json
from .simulation import TABLE_COLUMNS, BasisSpec, EstimatorSpec, SimDesign, run_table1, run_table2
from .splines import build_basis

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# sample-size rules of thumb for the asymptotic Wald test
MIN_RATIO_GMT = 35
MIN_RATIO_LS = 15


class UsageError(Exception):
    pass


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _parse_nu(text) -> float:
    if isinstance(text, (int, float)):
        value = float(text)
    elif str(text).lower() in ("inf", "infinity", "normal"):
        value = math.inf
    else:
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid degrees of freedom {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("degrees of freedom must be positive")
    return value


def _parse_rank(text):
    if str(text).lower() == "auto":
        return "auto"
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"rank must be a positive integer or 'auto', got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("rank must be >= 1")
    return value


def _positive_int(text) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return value


def _proportion(text) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError("expected a proportion in [0, 1)")
    return value


# --------------------------------------------------------------------------
# parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with flag values (keys use underscores)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-funreg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fpca", help="fit reduced-rank models to X and Y curves and predict scores")
    _add_common(p)
    p.add_argument("--x", help="long-format CSV of predictor curves")
    p.add_argument("--y", help="long-format CSV of response curves")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-knots", type=int, default=7, help="interior knots (default 7)")
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--domain-x", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--domain-y", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--p", type=_parse_rank, default=2, help="X rank or 'auto'")
    p.add_argument("--q", type=_parse_rank, default=2, help="Y rank or 'auto'")
    p.add_argument("--criterion", choices=("AIC", "BIC"), default="BIC")
    p.add_argument("--p-max", type=_positive_int, default=5, help="largest rank tried by 'auto'")
    p.add_argument("--nu", type=_parse_nu, default=5.0, help="t degrees of freedom of the score model; inf for Normal")
    p.add_argument("--transform", choices=("none", "log", "sqrt"), default=None, help="applied to both samples")
    p.add_argument("--transform-x", choices=("none", "log", "sqrt"), default="none")
    p.add_argument("--transform-y", choices=("none", "log", "sqrt"), default="none")
    p.add_argument("--hist-bins", type=_positive_int, default=20)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=_positive_int, default=500)

    p = sub.add_parser("regress", help="fit the score regression and export the slope surface")
    _add_common(p)
    p.add_argument("--dir", help="directory written by 'fpca'")
    p.add_argument("--out", help="output directory (default: --dir)")
    p.add_argument("--estimator", choices=("gmt", "ls"), default="gmt")
    p.add_argument("--nu-rho", type=_parse_nu, default=None, help="loss degrees of freedom (default: score model nu, else 5)")
    p.add_argument("--trim", choices=("metric", "rank", "none"), default="metric")
    p.add_argument("--alpha", type=_proportion, default=0.10)
    p.add_argument("--grid", type=_positive_int, default=51, help="points per axis of the slope surface grid")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--max-iter", type=_positive_int, default=1000)

    p = sub.add_parser("test", help="test whether the regression operator is zero")
    _add_common(p)
    p.add_argument("--dir", help="directory written by 'fpca' and 'regress'")
    p.add_argument("--out", help="output directory (default: --dir)")
    p.add_argument("--method", choices=("wald", "bootstrap", "permutation"), default="wald")
    p.add_argument("--n-resamples", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None, help="required for bootstrap and permutation")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("predict", help="predict response curves from predictor scores")
    _add_common(p)
    p.add_argument("--dir", help="directory written by 'fpca' and 'regress'")
    p.add_argument("--out", help="output directory (default: --dir)")
    p.add_argument("--y", help="response CSV for residuals (default: the one used by 'fpca')")
    p.add_argument("--grid", type=_positive_int, default=101)

    p = sub.add_parser("simulate", help="run a Monte Carlo experiment file")
    _add_common(p)
    p.add_argument("--experiment", help="experiment JSON file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="master seed (required)")
    p.add_argument("--n-reps", type=_positive_int, default=None, help="override the file's n_reps")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        action = known[dest]
        if action.type is not None and value is not None:
            try:
                value = [action.type(v) for v in value] if isinstance(value, list) else action.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
        defaults[dest] = value
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _out_dir(args) -> Path:
    out = Path(args.out if args.out is not None else args.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# artifact I/O


def _load_json(path: Path) -> Dict:
    if not path.exists():
        raise DataError(f"{path}: missing (run the previous pipeline step first)")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: {exc.msg}") from None


def _write_scores(path: Path, scores: ScoreSet) -> None:
    header = ["curve_id"] + [f"U{k + 1}" for k in range(scores.p)] + [f"V{k + 1}" for k in range(scores.q)] + ["D2"]
    rows = (
        [cid, *scores.U_hat[i], *scores.V_hat[i], scores.D2[i]]
        for i, cid in enumerate(scores.ids)
    )
    write_csv(path, header, rows)


def read_scores(path: Path, lambda_hat: np.ndarray) -> ScoreSet:
    """Load a score CSV written by ``fpca``; D2 is recomputed from ``lambda_hat``."""
    if not path.exists():
        raise DataError(f"{path}: missing (run 'fpca' first)")
    lines = path.read_text().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    header = lines[0].split(",")
    p = sum(1 for h in header if h.startswith("U"))
    q = sum(1 for h in header if h.startswith("V"))
    if header[0] != "curve_id" or header[-1] != "D2" or len(header) != p + q + 2 or p != lambda_hat.size:
        raise DataError(f"{path}:1: unexpected score header {lines[0]!r}")
    ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        try:
            rows.append([float(v) for v in fields[1 : 1 + p + q]])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        ids.append(fields[0])
    arr = np.array(rows, dtype=float).reshape(len(rows), p + q)
    return ScoreSet.from_scores(arr[:, :p], arr[:, p:], lambda_hat, ids)


def _load_models(d: Path):
    mx = ReducedRankModel.from_dict(_load_json(d / "model_x.json"))
    my = ReducedRankModel.from_dict(_load_json(d / "model_y.json"))
    return mx, my


def _gmt_config(cfg: Dict) -> Optional[GmtConfig]:
    if cfg["estimator"] == "ls":
        return None
    kind = "unit" if cfg["trim"] == "none" else cfg["trim"]
    return GmtConfig(
        nu_rho=float(cfg["nu_rho"]),
        weights=WeightScheme(kind, float(cfg["alpha"])),
        tol=float(cfg["tol"]),
        max_iter=int(cfg["max_iter"]),
    )


def _load_fit(d: Path):
    data = _load_json(d / "fit.json")
    p, q = int(data["p"]), int(data["q"])
    theta = np.asarray(data["theta"], dtype=float).reshape(p, q)
    return data, theta


# --------------------------------------------------------------------------
# commands


def _read_sample(path, domain, transform) -> LongitudinalSample:
    return read_long_csv(path, tuple(domain) if domain else None, transform)


def _fit_model(sample, basis, rank, args, label):
    options = FitOptions(tol=args.tol, max_iter=args.max_iter)
    selection = None
    if rank == "auto":
        selection = select_rank(sample, basis, args.p_max, args.nu, args.criterion, options)
        model = selection.models[selection.rank]
    else:
        model = fit_reduced_rank(sample, basis, rank, args.nu, options)
    if not model.converged:
        _warn(f"{label} model did not converge in {args.max_iter} EM iterations")
    for flag in model.flags:
        if flag != "not_converged":
            _warn(f"{label} model: {flag}")
    return model, selection


def cmd_fpca(args) -> int:
    _require(args, "x", "y", "out")
    tx = args.transform or args.transform_x
    ty = args.transform or args.transform_y
    sx = _read_sample(args.x, args.domain_x, tx)
    sy = _read_sample(args.y, args.domain_y, ty)
    px, py = pair_by_id(sx, sy)
    dropped = sx.n + sy.n - 2 * px.n
    if dropped:
        _warn(f"{dropped} curve(s) without a partner in the other sample were dropped")
    bx = build_basis(px.domain, args.n_knots, args.degree)
    by = build_basis(py.domain, args.n_knots, args.degree)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mx, sel_x = _fit_model(px, bx, args.p, args, "X")
        my, sel_y = _fit_model(py, by, args.q, args, "Y")
    scores = predict_scores(mx, my, px, py)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "model_x.json", mx.to_dict())
    write_json(out / "model_y.json", my.to_dict())
    _write_scores(out / "scores.csv", scores)

    ev_rows = []
    for name, model in (("X", mx), ("Y", my)):
        frac = model.explained_variance()
        cum = np.cumsum(frac)
        for k in range(model.p):
            ev_rows.append([name, k + 1, model.lam[k], frac[k], cum[k]])
    write_csv(out / "explained_variance.csv", ["model", "component", "lambda", "fraction", "cumulative"], ev_rows)

    counts, edges = np.histogram(scores.D2, bins=args.hist_bins)
    write_csv(out / "d2_histogram.csv", ["bin_lo", "bin_hi", "count"],
              ([edges[i], edges[i + 1], int(counts[i])] for i in range(counts.size)))

    report = {
        "x_path": str(Path(args.x).resolve()),
        "y_path": str(Path(args.y).resolve()),
        "transform_x": tx,
        "transform_y": ty,
        "n_curves": scores.n,
        "p": mx.p,
        "q": my.p,
        "nu": "inf" if math.isinf(args.nu) else args.nu,
        "converged_x": mx.converged,
        "converged_y": my.converged,
    }
    for label, sel in (("x", sel_x), ("y", sel_y)):
        if sel is not None:
            report[f"rank_selection_{label}"] = {
                "criterion": sel.criterion,
                "scores": {str(k): v for k, v in sorted(sel.scores.items())},
                "failures": {str(k): v for k, v in sorted(sel.failures.items())},
            }
    write_json(out / "fpca_report.json", report)
    return EXIT_OK


def cmd_regress(args) -> int:
    _require(args, "dir")
    d = Path(args.dir)
    mx, my = _load_models(d)
    scores = read_scores(d / "scores.csv", mx.lam)
    nu_rho = args.nu_rho
    if nu_rho is None:
        nu_rho = mx.nu if math.isfinite(mx.nu) else 5.0
    cfg = {
        "estimator": args.estimator,
        "nu_rho": nu_rho,
        "trim": args.trim,
        "alpha": args.alpha if args.trim != "none" else 0.0,
        "tol": args.tol,
        "max_iter": args.max_iter,
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_estimator(scores, args.estimator, _gmt_config(cfg))
    if not fit.converged:
        _warn(f"GMt iterations did not converge in {args.max_iter} steps")
    for flag in fit.flags:
        _warn(f"regression: {flag}")

    out = _out_dir(args)
    report = fit.to_dict()
    report["config"] = cfg
    report["ids"] = list(scores.ids)
    write_json(out / "fit.json", report)

    s = np.linspace(*mx.basis.domain, args.grid)
    t = np.linspace(*my.basis.domain, args.grid)
    surface = slope_surface(fit, mx, my, s, t)
    write_csv(out / "beta.csv", ["s", "t", "beta"], surface.rows())

    trimmed = [i for i in range(scores.n) if fit.weights[i] == 0]
    write_csv(out / "trimmed_ids.csv", ["curve_id", "D2"], ([scores.ids[i], scores.D2[i]] for i in trimmed))
    return EXIT_OK


def _sample_size_warning(n: int, p: int, q: int, estimator: str) -> None:
    need = MIN_RATIO_GMT if estimator == "gmt" else MIN_RATIO_LS
    ratio = n / (p * q)
    if ratio < need:
        _warn(f"n/(p*q) = {ratio:.3g} is below {need}; asymptotic Wald levels may be unreliable")


def cmd_test(args) -> int:
    _require(args, "dir")
    if args.method != "wald":
        _require(args, "seed")
    d = Path(args.dir)
    mx, _ = _load_models(d)
    scores = read_scores(d / "scores.csv", mx.lam)
    data, _ = _load_fit(d)
    cfg = data["config"]
    config = _gmt_config(cfg)
    estimator = cfg["estimator"]
    _sample_size_warning(scores.n, scores.p, scores.q, estimator)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if args.method == "wald":
            fit = fit_estimator(scores, estimator, config)
            result = analytic_test(fit, scores, config)
        elif args.method == "bootstrap":
            n = args.n_resamples or 500
            result = bootstrap_covariance(scores, config, n, args.seed, estimator, n_jobs=args.jobs).test
        else:
            n = args.n_resamples or 999
            result = permutation_test(scores, config, n, args.seed, estimator, n_jobs=args.jobs)
    report = result.to_dict()
    if args.seed is not None:
        report["seed"] = args.seed
    write_json(_out_dir(args) / "test.json", report)
    return EXIT_OK


def cmd_predict(args) -> int:
    _require(args, "dir")
    d = Path(args.dir)
    mx, my = _load_models(d)
    scores = read_scores(d / "scores.csv", mx.lam)
    data, theta = _load_fit(d)
    info = _load_json(d / "fpca_report.json")
    y_path = args.y or info["y_path"]
    sy = read_long_csv(y_path, tuple(my.basis.domain), info.get("transform_y", "none"))
    index = {cid: k for k, cid in enumerate(sy.ids)}
    missing = [cid for cid in scores.ids if cid not in index]
    if missing:
        raise DataError(f"{y_path}: no curves for ids {missing[:5]}")
    sy = sy.subset([index[cid] for cid in scores.ids])

    t = np.linspace(*my.basis.domain, args.grid)
    pred = predict_response(theta, scores, my, t, sy)
    out = _out_dir(args)
    write_csv(out / "predicted.csv", ["curve_id", "t", "value"],
              ([cid, t[j], pred.curves[i, j]] for i, cid in enumerate(pred.ids) for j in range(t.size)))
    write_json(out / "prediction_summary.json", {
        "n_curves": scores.n,
        "grid_size": int(t.size),
        "root_median_squared_error": pred.root_median_se,
        "per_curve_mse": {cid: float(pred.mse[i]) for i, cid in enumerate(pred.ids)},
    })
    return EXIT_OK


# --------------------------------------------------------------------------
# experiment files


_DESIGN_KEYS = {"n", "m", "p", "q", "theta_signal", "noise_sd", "shift"}


def parse_experiment(spec: Dict):
    """Validate an experiment dict; returns (table, designs, estimators, extras, invalid).

    Invalid design or estimator entries are returned as messages instead of
    raising, so the valid part of the grid can still run.
    """
    if not isinstance(spec, dict):
        raise UsageError("experiment file must hold a JSON object")
    table = spec.get("table", "table1")
    if table not in ("table1", "table2"):
        raise UsageError(f"unknown table {table!r}")
    invalid: List[str] = []
    designs = []
    for k, d in enumerate(spec.get("designs", [])):
        try:
            if not isinstance(d, dict):
                raise ValueError("design must be an object")
            unknown = set(d) - _DESIGN_KEYS
            if unknown:
                raise ValueError(f"unknown keys {sorted(unknown)}")
            kw = {key: (int(v) if key in ("n", "m", "p", "q") else float(v)) for key, v in d.items()}
            designs.append(SimDesign(**kw))
        except (TypeError, ValueError) as exc:
            invalid.append(f"designs[{k}]: {exc}")
    estimators = []
    for k, e in enumerate(spec.get("estimators", [{"estimator": "ls"}])):
        try:
            estimators.append(EstimatorSpec.from_dict(e))
        except (TypeError, ValueError, AttributeError) as exc:
            invalid.append(f"estimators[{k}]: {exc}")
    epsilons = []
    for k, eps in enumerate(spec.get("epsilons", [0.0])):
        try:
            eps = float(eps)
            if not 0.0 <= eps < 1.0:
                raise ValueError("epsilon must lie in [0, 1)")
            epsilons.append(eps)
        except (TypeError, ValueError) as exc:
            invalid.append(f"epsilons[{k}]: {exc}")
    n_reps = int(spec.get("n_reps", 200))
    if n_reps < 2:
        raise UsageError("n_reps must be >= 2")
    basis = spec.get("basis", {})
    extras = {
        "n_reps": n_reps,
        "epsilons": epsilons,
        "levels": [float(v) for v in spec.get("levels", (0.10, 0.05, 0.01))],
        "basis": BasisSpec(int(basis.get("n_knots", 7)), int(basis.get("degree", 3))),
    }
    return table, designs, estimators, extras, invalid


def run_experiment(spec: Dict, seed: int, n_jobs: int = 1, n_reps: Optional[int] = None):
    table, designs, estimators, extras, invalid = parse_experiment(spec)
    for msg in invalid:
        _warn(f"skipping invalid entry {msg}")
    if not designs or not estimators or (table == "table1" and not extras["epsilons"]):
        raise UsageError("experiment has no valid design cells")
    reps = n_reps or extras["n_reps"]
    cells = []
    if table == "table1":
        for design in designs:
            cells.extend(run_table1(design, extras["epsilons"], estimators, reps, seed,
                                    basis_spec=extras["basis"], n_jobs=n_jobs))
    else:
        cells = run_table2(designs, estimators, reps, seed, extras["levels"],
                           basis_spec=extras["basis"], n_jobs=n_jobs)
    return table, cells, invalid, reps


def cmd_simulate(args) -> int:
    _require(args, "experiment", "out", "seed")
    try:
        spec = json.loads(Path(args.experiment).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read experiment file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.experiment}:{exc.lineno}: {exc.msg}") from None
    table, cells, invalid, reps = run_experiment(spec, args.seed, args.jobs, args.n_reps)
    rows = [c.row() for c in cells]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.experiment).stem
    write_csv(out / f"{stem}.csv", TABLE_COLUMNS, ([r[c] for c in TABLE_COLUMNS] for r in rows))
    write_json(out / f"{stem}.json", {
        "table": table,
        "seed": args.seed,
        "n_reps": reps,
        "invalid": invalid,
        "columns": TABLE_COLUMNS,
        "rows": rows,
    })
    return EXIT_OK


COMMANDS = {
    "fpca": cmd_fpca,
    "regress": cmd_regress,
    "test": cmd_test,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse reports usage errors this way
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, RegressionError, InferenceError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
