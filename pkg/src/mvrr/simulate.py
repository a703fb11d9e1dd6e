"""Seeded data generators, evaluation metrics, the OLS baseline, and the
desk-scale benchmark harness.

Randomness comes from counter-based Philox streams keyed on
``(seed, replicate, purpose)``, so every draw is reproducible bit for bit
regardless of execution order or thread count.  Purpose codes:

    1 predictors          6 binary labels
    2 coefficients        7 validation predictors
    3 noise               8 validation noise
    4 missingness mask    9 validation labels
    5 intercept          10 metric-set predictors
"""

from __future__ import annotations

import csv
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from .glm import fit_model, null_intercept_binary
from .model import (
    BlockCoefficients,
    DataError,
    PenaltyWeights,
    ResponseData,
    build_design,
    compute_weights,
)
from .solver import SolverOptions
from .tuning import (
    _expand_result,
    adaptive_weights,
    lambda_grid,
    tune_validation,
)

_PREDICTORS, _COEFFS, _NOISE, _MASK, _INTERCEPT, _LABELS = 1, 2, 3, 4, 5, 6
_VAL_PREDICTORS, _VAL_NOISE, _VAL_LABELS, _METRIC_PREDICTORS = 7, 8, 9, 10

_GAUSSIAN_SETTINGS = (1, 2, 3, 4, 5)
_BINARY_SETTINGS = (6, 7)

VALID_METHODS = ("irrr", "irrr_adaptive", "mtl", "ols", "null")


def _stream(seed, replicate, purpose):
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
         np.uint64(((replicate & 0xFFFFFFFFFFFF) << 16) | purpose)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SimulationSpec:
    """Full parameterization of one benchmark scenario."""

    setting: int
    n: int
    K: int
    p_k: tuple
    q: int
    ranks: tuple
    global_rank: int | None = None
    noise_sd: float = 1.0
    predictor_corr: float = 0.0
    error_model: str = "iid"
    ar1_corr: float = 0.5
    missing_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.setting not in _GAUSSIAN_SETTINGS + _BINARY_SETTINGS:
            raise DataError(f"unknown setting {self.setting}")
        if len(self.p_k) != self.K or len(self.ranks) != self.K:
            raise DataError("p_k and ranks must have one entry per view")
        for pk, r in zip(self.p_k, self.ranks):
            if not 0 <= r <= min(pk, self.q):
                raise DataError(f"rank {r} exceeds min({pk}, {self.q})")
        if self.global_rank is not None:
            if self.global_rank > sum(self.ranks):
                raise DataError("global rank cannot exceed the rank sum")
            if self.global_rank < max(self.ranks):
                raise DataError("global rank cannot be below any block rank")
        if not 0.0 <= self.missing_frac < 1.0:
            raise DataError("missing_frac must lie in [0, 1)")
        if self.error_model not in ("iid", "ar1"):
            raise DataError(f"unknown error model {self.error_model!r}")
        if not 0.0 <= self.predictor_corr < 1.0:
            raise DataError("predictor_corr must lie in [0, 1)")

    @property
    def family(self):
        return "binary" if self.setting in _BINARY_SETTINGS else "gaussian"

    @property
    def p(self):
        return sum(self.p_k)


def setting_spec(setting, seed=0, missing_frac=0.0, error_model="iid",
                 K=None, r0=None, n=None, p_k=None, q=None, ranks=None,
                 noise_sd=None, predictor_corr=None):
    """Benchmark scenario presets.

    Settings: 1 basic, 2 collinear predictors, 3 shared row spaces at global
    rank ``r0`` (20/40/60), 4 multiple views (K defaults to 3), 5 one
    irrelevant view, 6 binary basic, 7 binary with an irrelevant view.
    Keyword overrides allow reduced-scale variants.
    """
    setting = int(setting)
    if setting in (4,):
        K = 3 if K is None else int(K)
    elif setting in (5, 7):
        K = 3
    else:
        K = 2
    n_default = 200 if setting in _BINARY_SETTINGS else 500
    corr = 0.9 if setting == 2 else 0.0
    global_rank = None
    if setting == 3:
        r0 = 20 if r0 is None else int(r0)
        if r0 not in (20, 40, 60):
            raise DataError("setting 3 scenarios use r0 in {20, 40, 60}")
        block_rank = {20: 20, 40: 40, 60: 50}[r0]
        default_ranks = (block_rank,) * K
        global_rank = r0
    elif setting in (5, 7):
        default_ranks = (10, 10, 0)
    else:
        default_ranks = (10,) * K
    spec = SimulationSpec(
        setting=setting,
        n=int(n) if n is not None else n_default,
        K=K,
        p_k=tuple(p_k) if p_k is not None else (50,) * K,
        q=int(q) if q is not None else 100,
        ranks=tuple(ranks) if ranks is not None else default_ranks,
        global_rank=global_rank,
        noise_sd=float(noise_sd) if noise_sd is not None else 1.0,
        predictor_corr=float(predictor_corr) if predictor_corr is not None else corr,
        error_model=error_model,
        missing_frac=float(missing_frac),
        seed=int(seed),
    )
    return spec


@dataclass(frozen=True)
class SimulatedDataset:
    blocks: tuple
    B0_blocks: tuple
    mu0: np.ndarray
    Y: np.ndarray
    Sigma_x: np.ndarray
    mask: np.ndarray
    family: str
    spec: SimulationSpec
    replicate: int

    def __post_init__(self):
        for arr in (*self.blocks, *self.B0_blocks, self.mu0, self.Y,
                    self.Sigma_x, self.mask):
            arr.flags.writeable = False

    @property
    def B0(self):
        return np.vstack(self.B0_blocks)

    def response(self):
        return ResponseData(values=self.Y, family=self.family, mask=self.mask)


def _draw_predictors(spec, rng, n):
    Z = rng.standard_normal((n, spec.p))
    c = spec.predictor_corr
    if c > 0.0:
        g = rng.standard_normal((n, 1))
        Z = np.sqrt(1.0 - c) * Z + np.sqrt(c) * g
    Z -= Z.mean(axis=0)
    blocks, start = [], 0
    for pk in spec.p_k:
        blocks.append(Z[:, start:start + pk].copy())
        start += pk
    return blocks


def _draw_coefficients(spec, rng):
    q = spec.q
    if spec.global_rank is not None:
        r0 = spec.global_rank
        pool = rng.standard_normal((q, r0))
        blocks = []
        for k, (pk, rk) in enumerate(zip(spec.p_k, spec.ranks)):
            off = 0 if spec.K == 1 else round(k * (r0 - rk) / (spec.K - 1))
            R = pool[:, off:off + rk]
            L = rng.standard_normal((pk, rk))
            blocks.append(L @ R.T)
        return blocks
    blocks = []
    for pk, rk in zip(spec.p_k, spec.ranks):
        if rk == 0:
            blocks.append(np.zeros((pk, q)))
            continue
        L = rng.standard_normal((pk, rk))
        R = rng.standard_normal((q, rk))
        blocks.append(L @ R.T)
    return blocks


def _draw_noise(spec, rng, n):
    E = rng.standard_normal((n, spec.q))
    if spec.error_model == "ar1":
        idx = np.arange(spec.q)
        cov = spec.ar1_corr ** np.abs(idx[:, None] - idx[None, :])
        E = E @ np.linalg.cholesky(cov).T
    return spec.noise_sd * E


def _sigma_x(spec):
    if spec.predictor_corr > 0.0:
        S = np.full((spec.p, spec.p), spec.predictor_corr)
        np.fill_diagonal(S, 1.0)
        return S
    return np.eye(spec.p)


def generate(spec, replicate=0):
    """One seeded dataset for the given scenario and replicate index."""
    blocks = _draw_predictors(spec, _stream(spec.seed, replicate, _PREDICTORS),
                              spec.n)
    B0_blocks = _draw_coefficients(spec, _stream(spec.seed, replicate, _COEFFS))
    X = np.hstack(blocks)
    B0 = np.vstack(B0_blocks)
    signal = X @ B0
    if spec.family == "binary":
        mu0 = _stream(spec.seed, replicate, _INTERCEPT).uniform(-1, 1, spec.q)
        U = _stream(spec.seed, replicate, _LABELS).random((spec.n, spec.q))
        Y = (U < expit(mu0 + signal)).astype(float)
    else:
        mu0 = np.zeros(spec.q)
        Y = signal + _draw_noise(spec, _stream(spec.seed, replicate, _NOISE),
                                 spec.n)
    if spec.missing_frac > 0.0:
        mask = _stream(spec.seed, replicate, _MASK).random(Y.shape) \
            >= spec.missing_frac
    else:
        mask = np.ones(Y.shape, dtype=bool)
    return SimulatedDataset(
        blocks=tuple(blocks),
        B0_blocks=tuple(B0_blocks),
        mu0=mu0,
        Y=Y,
        Sigma_x=_sigma_x(spec),
        mask=mask,
        family=spec.family,
        spec=spec,
        replicate=replicate,
    )


def generate_validation(spec, replicate, dataset, n_val, labeled=True,
                        metric_set=False):
    """Independent predictor draw (and response, when labeled) sharing the
    dataset's true coefficients."""
    px = _METRIC_PREDICTORS if metric_set else _VAL_PREDICTORS
    blocks = _draw_predictors(spec, _stream(spec.seed, replicate, px), n_val)
    if not labeled:
        return blocks, None
    X = np.hstack(blocks)
    signal = X @ dataset.B0
    if spec.family == "binary":
        U = _stream(spec.seed, replicate, _VAL_LABELS).random((n_val, spec.q))
        Y = (U < expit(dataset.mu0 + signal)).astype(float)
    else:
        Y = signal + _draw_noise(
            spec, _stream(spec.seed, replicate, _VAL_NOISE), n_val)
    return blocks, Y


def mspe(B0, B_hat, Sigma_x):
    """Trace-form prediction error ``tr{(B0 - B)' Sigma_x (B0 - B)}``."""
    B0 = np.asarray(B0, dtype=float)
    B_hat = np.asarray(B_hat, dtype=float)
    Sigma_x = np.asarray(Sigma_x, dtype=float)
    if B0.shape != B_hat.shape:
        raise DataError("coefficient matrices must have equal shapes")
    if Sigma_x.shape != (B0.shape[0], B0.shape[0]):
        raise DataError("Sigma_x does not conform to the coefficients")
    if not np.allclose(Sigma_x, Sigma_x.T, atol=1e-10):
        raise DataError("Sigma_x must be symmetric")
    D = B0 - B_hat
    return float(np.sum(D * (Sigma_x @ D)))


def cross_entropy(mu0, B0, mu_hat, B_hat, X_val, clip=1e-12):
    """Average cross entropy between true and estimated Bernoulli probabilities
    over a validation design (summed over responses, averaged over rows)."""
    X_val = np.asarray(X_val, dtype=float)
    theta = np.asarray(mu0) + X_val @ np.asarray(B0)
    theta_hat = np.asarray(mu_hat) + X_val @ np.asarray(B_hat)
    p = expit(theta)
    p_hat = np.clip(expit(theta_hat), clip, 1.0 - clip)
    n = X_val.shape[0]
    val = -(p * np.log(p_hat) + (1.0 - p) * np.log1p(-p_hat)).sum() / n
    return float(val)


def avg_deviance(Y, P_hat, mask=None, clip=1e-12):
    """Minus twice the mean Bernoulli log-likelihood over observed cells."""
    Y = np.asarray(Y, dtype=float)
    P_hat = np.clip(np.asarray(P_hat, dtype=float), clip, 1.0 - clip)
    if mask is None:
        mask = np.ones(Y.shape, dtype=bool)
    n_obs = int(mask.sum())
    if n_obs == 0:
        raise DataError("no observed cells")
    ll = np.where(mask, Y * np.log(P_hat) + (1.0 - Y) * np.log1p(-P_hat), 0.0)
    return float(-2.0 * ll.sum() / n_obs)


def auc(labels, scores):
    """Mann-Whitney area under the ROC curve, ties counted half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=float)
    pos = labels == 1
    neg = labels == 0
    if not (pos.any() and neg.any()):
        raise DataError("AUC requires both classes")
    ranks = rankdata(scores)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


def ols_baseline(design, Y):
    """Least-squares coefficients partitioned into views (requires n > p)."""
    Y = np.asarray(Y, dtype=float)
    if design.n <= design.p:
        raise DataError("OLS needs more rows than columns")
    X = design.matrix
    mu = Y.mean(axis=0)
    G = X.T @ X
    try:
        chol = scipy.linalg.cho_factor(G, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise DataError("design is rank deficient") from exc
    B = scipy.linalg.cho_solve(chol, X.T @ (Y - mu))
    return BlockCoefficients(intercept=mu, blocks=tuple(design.split(B)))


def _regroup_single_columns(design):
    X = design.matrix
    return build_design([X[:, j:j + 1] for j in range(design.p)],
                        center=False, scale=False)


@dataclass
class BenchmarkResult:
    spec: SimulationSpec
    methods: tuple
    replicates: int
    rows: list
    summary: dict


def _view_rows(replicate, method, coeffs):
    rows = []
    fro = coeffs.frobenius_norms()
    for k in range(len(coeffs.blocks)):
        rows.append({"replicate": replicate, "method": method,
                     "metric": f"fnorm_view{k + 1}", "value": float(fro[k])})
        rows.append({"replicate": replicate, "method": method,
                     "metric": f"rank_view{k + 1}",
                     "value": float(coeffs.ranks[k])})
    return rows


class _BenchmarkRunner:
    """Tunes once on a dedicated replicate, then evaluates at fixed penalties."""

    def __init__(self, spec, methods, options, n_lambda, min_ratio, n_val):
        self.spec = spec
        self.methods = methods
        self.options = options or SolverOptions()
        self.n_lambda = n_lambda
        self.min_ratio = min_ratio
        if n_val is None:
            n_val = spec.n
        self.n_val = n_val
        self.selected = {}
        self._tune()

    def _build(self, dataset):
        design = build_design(dataset.blocks, center=True, scale=False)
        return design, dataset.response()

    def _tuning_pair(self, dataset, design):
        val_blocks, Y_val = generate_validation(
            self.spec, dataset.replicate, dataset, self.n_val)
        design_val = design.replay(val_blocks)
        resp_val = ResponseData(values=Y_val, family=self.spec.family)
        return design_val, resp_val

    def _tune(self):
        spec = self.spec
        needs_lambda = {"irrr", "irrr_adaptive", "mtl"} & set(self.methods)
        if not needs_lambda:
            return
        ds = generate(spec, replicate=0)
        design, resp = self._build(ds)
        design_val, resp_val = self._tuning_pair(ds, design)
        if {"irrr", "irrr_adaptive"} & set(self.methods):
            w = compute_weights(design, spec.q)
            grid = lambda_grid(design, resp, w, self.n_lambda, self.min_ratio)
            pilot = tune_validation(design, resp, design_val, resp_val,
                                    grid, w, self.options)
            self.selected["irrr"] = pilot.lambda_
            if "irrr_adaptive" in self.methods:
                new_w, kept = adaptive_weights(pilot)
                if kept.any():
                    kept_idx = np.flatnonzero(kept)
                    sub = design.subset_views(kept_idx)
                    sub_w = PenaltyWeights(w=new_w.w[kept], source="adaptive")
                    sub_grid = lambda_grid(sub, resp, sub_w, self.n_lambda,
                                           self.min_ratio)
                    refit = tune_validation(
                        sub, resp, design_val.subset_views(kept_idx),
                        resp_val, sub_grid, sub_w, self.options)
                    self.selected["irrr_adaptive"] = refit.lambda_
                else:
                    self.selected["irrr_adaptive"] = pilot.lambda_
        if "mtl" in self.methods:
            design_m = _regroup_single_columns(design)
            w_m = compute_weights(design_m, spec.q)
            grid_m = lambda_grid(design_m, resp, w_m, self.n_lambda,
                                 self.min_ratio)
            val_m = _regroup_single_columns(design_val)
            res_m = tune_validation(design_m, resp, val_m, resp_val,
                                    grid_m, w_m, self.options)
            self.selected["mtl"] = res_m.lambda_

    def _metric_rows(self, replicate, method, dataset, coeffs):
        rows = []
        if self.spec.family == "binary":
            blocks_m, _ = generate_validation(self.spec, replicate, dataset,
                                              500, labeled=False,
                                              metric_set=True)
            value = cross_entropy(dataset.mu0, dataset.B0, coeffs.intercept,
                                  coeffs.stacked, np.hstack(blocks_m))
            metric = "cross_entropy"
        else:
            value = mspe(dataset.B0, coeffs.stacked, dataset.Sigma_x)
            metric = "mspe"
        rows.append({"replicate": replicate, "method": method,
                     "metric": metric, "value": value})
        if len(coeffs.blocks) == self.spec.K:
            rows.extend(_view_rows(replicate, method, coeffs))
        return rows

    def _fit_method(self, method, dataset, design, resp):
        spec = self.spec
        if method == "ols":
            if not resp.complete:
                raise DataError("OLS requires complete responses")
            return ols_baseline(design, resp.values)
        if method == "null":
            if spec.family == "binary":
                mu = null_intercept_binary(resp.values, resp.mask)
            else:
                counts = resp.mask.sum(axis=0)
                mu = np.where(resp.mask, resp.values, 0.0).sum(axis=0) / counts
            return BlockCoefficients(
                intercept=mu,
                blocks=tuple(np.zeros((pk, spec.q)) for pk in design.p_k))
        if method == "mtl":
            design_m = _regroup_single_columns(design)
            w_m = compute_weights(design_m, spec.q)
            res = fit_model(design_m, resp, self.selected["mtl"], w_m,
                            self.options)
            return BlockCoefficients(
                intercept=res.coefficients.intercept,
                blocks=tuple(design.split(res.coefficients.stacked)))
        # irrr / irrr_adaptive
        w = compute_weights(design, spec.q)
        pilot = fit_model(design, resp, self.selected["irrr"], w, self.options)
        if method == "irrr":
            return pilot.coefficients
        new_w, kept = adaptive_weights(pilot)
        if not kept.any():
            return BlockCoefficients(
                intercept=pilot.coefficients.intercept,
                blocks=tuple(np.zeros((pk, spec.q)) for pk in design.p_k))
        kept_idx = np.flatnonzero(kept)
        sub = design.subset_views(kept_idx)
        sub_w = PenaltyWeights(w=new_w.w[kept], source="adaptive")
        res = fit_model(sub, resp, self.selected["irrr_adaptive"], sub_w,
                        self.options)
        full = _expand_result(design, res, kept, new_w, self.options.rank_tol)
        return full.coefficients

    def run_replicate(self, replicate):
        dataset = generate(self.spec, replicate=replicate)
        design, resp = self._build(dataset)
        rows = []
        for method in self.methods:
            try:
                coeffs = self._fit_method(method, dataset, design, resp)
                rows.extend(self._metric_rows(replicate, method, dataset,
                                              coeffs))
            except Exception as exc:
                warnings.warn(f"replicate {replicate} {method} failed: {exc}")
                metric = ("cross_entropy" if self.spec.family == "binary"
                          else "mspe")
                rows.append({"replicate": replicate, "method": method,
                             "metric": metric, "value": float("nan"),
                             "error": str(exc)})
        return rows


def run_benchmark(spec, replicates, methods=("irrr", "ols"), options=None,
                  n_lambda=50, min_ratio=1e-3, threads=1, n_val=None):
    """Replicated benchmark: tune once on a dedicated dataset, then fit each
    method at its fixed penalty on fresh replicates and score it.

    Returns per-replicate metric rows plus a mean/sd summary per method.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in VALID_METHODS:
            raise DataError(f"unknown method {m!r}")
    if replicates < 1:
        raise DataError("need at least one replicate")
    # BLAS stays single-threaded inside each fit so results are identical
    # for any worker count; replicates are the unit of parallelism.
    with threadpool_limits(limits=1):
        runner = _BenchmarkRunner(spec, methods, options, n_lambda, min_ratio,
                                  n_val)
        reps = range(1, replicates + 1)
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                all_rows = list(pool.map(runner.run_replicate, reps))
        else:
            all_rows = [runner.run_replicate(r) for r in reps]
        rows = [row for chunk in all_rows for row in chunk]

    summary = {"config": asdict(spec),
               "methods": {},
               "replicates": replicates,
               "selected_lambda": dict(runner.selected),
               "seed": spec.seed}
    by_key = {}
    for row in rows:
        by_key.setdefault((row["method"], row["metric"]), []).append(
            row["value"])
    for (method, metric), values in sorted(by_key.items()):
        arr = np.asarray(values, dtype=float)
        ok = arr[np.isfinite(arr)]
        entry = summary["methods"].setdefault(method, {})
        entry[metric] = {
            "mean": float(ok.mean()) if ok.size else float("nan"),
            "sd": float(ok.std(ddof=1)) if ok.size > 1 else 0.0,
            "n": int(ok.size),
        }
    return BenchmarkResult(spec=spec, methods=methods, replicates=replicates,
                           rows=rows, summary=summary)


def write_benchmark_csv(result, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "method", "metric", "value"])
        for row in result.rows:
            value = row["value"]
            writer.writerow([row["replicate"], row["method"], row["metric"],
                             f"{value:.17g}" if np.isfinite(value) else "NA"])


def write_benchmark_summary(result, path):
    with open(path, "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
