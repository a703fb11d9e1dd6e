"""Command-line interface: fit, cross-validate, predict, and benchmark.

Matrices travel as headerless CSV (17 significant digits, ``NA`` marks a
missing response cell); view boundaries come from a JSON file of inclusive
zero-based column ranges.  Exit codes: 0 ok, 1 usage, 2 data error,
3 numerical failure.  Diagnostics go to stderr, data to files only.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np
from scipy.special import expit
from threadpoolctl import threadpool_limits

from .glm import fit_model
from .model import (
    DataError,
    NumericalError,
    ResponseData,
    build_design,
    compute_weights,
)
from .simulate import (
    run_benchmark,
    setting_spec,
    write_benchmark_csv,
    write_benchmark_summary,
)
from .solver import SolverOptions
from .tuning import adaptive_refit, cross_validate, lambda_grid, single_lambda_grid

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _read_matrix(path, allow_na=False):
    """Parse a headerless numeric CSV; NA cells (when allowed) come back as
    NaN plus a False mask entry."""
    rows = []
    mask_rows = []
    saw_na = False
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for i, record in enumerate(csv.reader(fh)):
            if not record:
                continue
            vals = []
            obs = []
            for j, tok in enumerate(record):
                tok = tok.strip()
                if tok == "NA":
                    if not allow_na:
                        raise DataError(
                            f"{path}: NA at row {i}, column {j} is not allowed")
                    vals.append(np.nan)
                    obs.append(False)
                    saw_na = True
                    continue
                try:
                    vals.append(float(tok))
                except ValueError as exc:
                    raise DataError(
                        f"{path}: bad value {tok!r} at row {i}, column {j}"
                    ) from exc
                obs.append(True)
            rows.append(vals)
            mask_rows.append(obs)
    if not rows:
        raise DataError(f"{path}: empty matrix")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i} has {len(r)} columns, expected {width}")
    M = np.asarray(rows, dtype=float)
    mask = np.asarray(mask_rows, dtype=bool) if saw_na else None
    return M, mask


def _write_matrix(path, M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in M:
            writer.writerow([f"{x:.17g}" for x in row])


def _load_view_spec(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise DataError(f"{path}: view spec must be a non-empty list")
    views = []
    for i, entry in enumerate(raw):
        try:
            name = str(entry["name"])
            start, end = int(entry["cols"][0]), int(entry["cols"][1])
        except (KeyError, TypeError, IndexError, ValueError) as exc:
            raise DataError(
                f"{path}: view {i} must have a name and cols=[start, end]"
            ) from exc
        if start < 0 or end < start:
            raise DataError(f"{path}: view {name!r} has invalid range "
                            f"[{start}, {end}]")
        views.append({"name": name, "cols": [start, end]})
    ordered = sorted(views, key=lambda v: v["cols"][0])
    if ordered != views:
        raise DataError(f"{path}: views must be listed in column order")
    for a, b in zip(views, views[1:]):
        if b["cols"][0] <= a["cols"][1]:
            raise DataError(
                f"{path}: views {a['name']!r} and {b['name']!r} overlap on "
                f"columns [{b['cols'][0]}, {min(a['cols'][1], b['cols'][1])}]")
    return views


def _select_blocks(X, views, path="predictor CSV"):
    top = max(v["cols"][1] for v in views)
    if X.shape[1] <= top:
        raise DataError(f"{path} has {X.shape[1]} columns but the view spec "
                        f"references column {top}")
    return [X[:, v["cols"][0]:v["cols"][1] + 1] for v in views]


def _threads(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("MVRR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise DataError(f"MVRR_THREADS={env!r} is not an integer") from exc
    return 1


def _options(args):
    return SolverOptions(ridge_lambda2=getattr(args, "ridge", 0.0))


def _load_problem(args):
    X, xmask = _read_matrix(args.x)
    if xmask is not None:
        raise DataError("predictors may not contain NA cells")
    views = _load_view_spec(args.views)
    blocks = _select_blocks(X, views, args.x)
    Y, ymask = _read_matrix(args.y, allow_na=True)
    if Y.shape[0] != X.shape[0]:
        raise DataError(f"Y has {Y.shape[0]} rows but X has {X.shape[0]}")
    response = ResponseData(values=Y, family=args.family, mask=ymask)
    design = build_design(blocks, center=args.center, scale=args.scale,
                          view_names=[v["name"] for v in views])
    return design, response, views, X.shape[1]


def _fit_report(design, views, n_input_columns, response, result, args,
                elapsed, extra=None):
    coeffs = result.coefficients
    fro = coeffs.frobenius_norms()
    report = {
        "family": response.family,
        "lambda": result.lambda_,
        "lambda2": getattr(args, "ridge", 0.0),
        "center": args.center,
        "scale": args.scale,
        "n": design.n,
        "p": design.p,
        "q": response.q,
        "n_input_columns": n_input_columns,
        "views": [
            {"name": v["name"], "cols": v["cols"],
             "p_k": int(design.p_k[k]),
             "fro_norm": float(fro[k]),
             "nuclear_norm": float(coeffs.nuclear_norms[k]),
             "rank": int(coeffs.ranks[k])}
            for k, v in enumerate(views)
        ],
        "intercept": coeffs.intercept.tolist(),
        "column_means": design.column_means.tolist(),
        "column_scales": design.column_scales.tolist(),
        "weights": [float(w) for w in result.weights.w],
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "r_primal": float(result.final_r_primal),
        "r_dual": float(result.final_r_dual),
        "objective": float(result.objective),
        "elapsed_sec": elapsed,
    }
    if extra:
        report.update(extra)
    return report


def _emit_fit(args, design, views, n_cols, response, result, elapsed,
              extra=None):
    _write_matrix(args.coef_out, result.coefficients.stacked)
    if response.family == "binary":
        intercept_path = getattr(args, "intercept_out", None)
        if not intercept_path:
            root, ext = os.path.splitext(args.coef_out)
            intercept_path = f"{root}_intercept{ext or '.csv'}"
        _write_matrix(intercept_path, result.coefficients.intercept[None, :])
    report = _fit_report(design, views, n_cols, response, result, args,
                         elapsed, extra)
    with open(args.report_out, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def cmd_fit(args):
    design, response, views, n_cols = _load_problem(args)
    weights = compute_weights(design, response.q)
    t0 = time.perf_counter()
    result = fit_model(design, response, args.lambda_, weights, _options(args))
    elapsed = time.perf_counter() - t0
    _emit_fit(args, design, views, n_cols, response, result, elapsed)
    print(f"fit: lambda={result.lambda_:.6g} iterations={result.iterations} "
          f"converged={result.converged}", file=sys.stderr)
    return EXIT_OK


def cmd_cv(args):
    design, response, views, n_cols = _load_problem(args)
    weights = compute_weights(design, response.q)
    options = _options(args)
    if args.nlambda == 1:
        grid = single_lambda_grid(design, response, weights)
    else:
        grid = lambda_grid(design, response, weights, args.nlambda,
                           args.lambda_min_ratio)
    t0 = time.perf_counter()
    report = cross_validate(design, response, grid, weights, k=args.folds,
                            options=options, seed=args.seed,
                            threads=_threads(args))
    result = fit_model(design, response, report.selected_lambda, weights,
                       options)
    extra = {"selected_by": "cv", "folds": args.folds, "seed": args.seed}
    if args.adaptive:
        result = adaptive_refit(design, response, result, grid, options,
                                k=args.folds, seed=args.seed)
        extra["adaptive"] = True
    elapsed = time.perf_counter() - t0
    cv_payload = {
        "lambda_grid": report.grid.values.tolist(),
        "fold_errors": [[None if np.isnan(x) else x for x in row]
                        for row in report.fold_errors],
        "mean_error": report.mean_error.tolist(),
        "se_error": report.se_error.tolist(),
        "selected_lambda": report.selected_lambda,
        "selection_rule": report.selection_rule,
        "folds": args.folds,
        "seed": args.seed,
    }
    with open(args.cv_out, "w") as fh:
        json.dump(cv_payload, fh, indent=2)
        fh.write("\n")
    _emit_fit(args, design, views, n_cols, response, result, elapsed, extra)
    print(f"cv: selected lambda={report.selected_lambda:.6g}",
          file=sys.stderr)
    return EXIT_OK


def cmd_predict(args):
    try:
        with open(args.report) as fh:
            report = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {args.report}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{args.report}: invalid JSON: {exc}") from exc
    B, bmask = _read_matrix(args.coef)
    if bmask is not None:
        raise DataError("coefficient CSV may not contain NA cells")
    p, q = report["p"], report["q"]
    if B.shape != (p, q):
        raise DataError(f"coefficient CSV is {B.shape[0]}x{B.shape[1]}, "
                        f"report expects {p}x{q}")
    X, xmask = _read_matrix(args.x)
    if xmask is not None:
        raise DataError("predictors may not contain NA cells")
    if X.shape[1] != report["n_input_columns"]:
        raise DataError(f"{args.x} has {X.shape[1]} columns, model was fit on "
                        f"{report['n_input_columns']}")
    views = report["views"]
    blocks = _select_blocks(X, views, args.x)
    Xs = np.hstack(blocks)
    means = np.asarray(report["column_means"])
    scales = np.asarray(report["column_scales"])
    Xc = (Xs - means) / scales
    intercept = np.asarray(report["intercept"])
    theta = intercept + Xc @ B
    _write_matrix(args.out, theta)
    if report["family"] == "binary":
        probs_path = args.probs_out
        if not probs_path:
            root, ext = os.path.splitext(args.out)
            probs_path = f"{root}_probs{ext or '.csv'}"
        _write_matrix(probs_path, expit(theta))
    return EXIT_OK


def cmd_simulate(args):
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    spec = setting_spec(
        args.setting,
        seed=args.seed,
        missing_frac=args.missing,
        error_model="ar1" if args.ar1 else "iid",
        K=args.k,
        r0=args.r0,
    )
    result = run_benchmark(spec, args.reps, methods, options=SolverOptions(),
                           n_lambda=args.nlambda, threads=_threads(args))
    write_benchmark_csv(result, args.out)
    summary_path = args.summary_out
    if not summary_path:
        root, _ = os.path.splitext(args.out)
        summary_path = f"{root}_summary.json"
    write_benchmark_summary(result, summary_path)
    for method, metrics in sorted(result.summary["methods"].items()):
        for metric, stats in sorted(metrics.items()):
            if not metric.startswith(("fnorm", "rank")):
                print(f"simulate: {method} {metric} mean={stats['mean']:.4f} "
                      f"sd={stats['sd']:.4f}", file=sys.stderr)
    return EXIT_OK


def _add_common_fit_args(sub):
    sub.add_argument("--x", required=True, help="predictor CSV")
    sub.add_argument("--views", required=True, help="view spec JSON")
    sub.add_argument("--y", required=True, help="response CSV (NA = missing)")
    sub.add_argument("--family", choices=("gaussian", "binary"),
                     default="gaussian")
    sub.add_argument("--ridge", type=float, default=0.0,
                     help="ridge penalty lambda2")
    center = sub.add_mutually_exclusive_group()
    center.add_argument("--center", dest="center", action="store_true",
                        default=True)
    center.add_argument("--no-center", dest="center", action="store_false")
    sub.add_argument("--scale", action="store_true", default=False,
                     help="scale columns so X'X/n has unit diagonal")
    sub.add_argument("--coef-out", required=True)
    sub.add_argument("--intercept-out", default=None)
    sub.add_argument("--report-out", required=True)
    sub.add_argument("--threads", type=int, default=None)


def build_parser():
    parser = _Parser(prog="mvrr",
                     description="Multi-view reduced-rank regression")
    subs = parser.add_subparsers(dest="command", required=True)

    fit = subs.add_parser("fit", help="fit at a fixed penalty")
    _add_common_fit_args(fit)
    fit.add_argument("--lambda", dest="lambda_", type=float, required=True)
    fit.set_defaults(func=cmd_fit)

    cv = subs.add_parser("cv", help="cross-validated fit")
    _add_common_fit_args(cv)
    cv.add_argument("--folds", type=int, default=5)
    cv.add_argument("--nlambda", type=int, default=50)
    cv.add_argument("--lambda-min-ratio", type=float, default=1e-3)
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--adaptive", action="store_true", default=False)
    cv.add_argument("--cv-out", required=True, help="CV report JSON")
    cv.set_defaults(func=cmd_cv)

    pred = subs.add_parser("predict", help="predict from an emitted fit")
    pred.add_argument("--coef", required=True)
    pred.add_argument("--report", required=True)
    pred.add_argument("--x", required=True)
    pred.add_argument("--out", required=True)
    pred.add_argument("--probs-out", default=None)
    pred.set_defaults(func=cmd_predict)

    sim = subs.add_parser("simulate", help="replicated benchmark")
    sim.add_argument("--setting", type=int, required=True,
                     choices=range(1, 8))
    sim.add_argument("--reps", type=int, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--missing", type=float, default=0.0)
    sim.add_argument("--ar1", action="store_true", default=False)
    sim.add_argument("--methods", default="irrr,ols")
    sim.add_argument("--k", type=int, default=None,
                     help="number of views for setting 4")
    sim.add_argument("--r0", type=int, default=None,
                     help="global rank scenario for setting 3")
    sim.add_argument("--nlambda", type=int, default=50)
    sim.add_argument("--out", required=True)
    sim.add_argument("--summary-out", default=None)
    sim.add_argument("--threads", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        # BLAS parallelism off: fits are single threaded by design and
        # --threads / MVRR_THREADS controls task-level parallelism instead.
        with threadpool_limits(limits=1):
            return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as exc:  # keep the exit-code contract closed
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
