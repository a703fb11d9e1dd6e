"""Penalty-grid construction, solution paths, cross-validation, validation-set
tuning, and the adaptively reweighted refit."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .glm import fit_model, lambda_max_binary, neg_loglik_binary, null_intercept_binary
from .model import (
    BlockCoefficients,
    DataError,
    PenaltyWeights,
    ResponseData,
    build_design,
    compute_weights,
    lambda_max,
    linear_predictor,
    masked_objective,
)
from .solver import FitResult, SolverOptions


@dataclass(frozen=True)
class LambdaGrid:
    """Strictly decreasing penalty levels, anchored at the data's lambda_max."""

    values: np.ndarray
    n_values: int
    min_ratio: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or len(values) != self.n_values:
            raise DataError("grid length does not match n_values")
        if (values <= 0).any() or (np.diff(values) >= 0).any():
            raise DataError("grid values must be positive and strictly decreasing")

    def rescaled(self, new_max):
        """Same ratios, re-anchored at a different lambda_max."""
        return LambdaGrid(new_max * self.values / self.values[0],
                          self.n_values, self.min_ratio)


@dataclass(frozen=True)
class CvReport:
    grid: LambdaGrid
    fold_errors: np.ndarray
    mean_error: np.ndarray
    se_error: np.ndarray
    selected_lambda: float
    selection_rule: str = "min"


def _as_response(Y, family="gaussian", mask=None):
    if isinstance(Y, ResponseData):
        return Y
    return ResponseData(values=Y, family=family, mask=mask)


def effective_lambda_max(design, response, weights):
    """Smallest penalty at which the fit's own null model is stationary.

    The Gaussian fit centers the response internally and missing cells are
    filled at the null fixed point, so the gradient is evaluated against
    those residuals rather than the raw response.
    """
    response = _as_response(response)
    if response.family == "binary":
        return lambda_max_binary(design, response.values, response.mask, weights)
    Y, mask = response.values, response.mask
    counts = mask.sum(axis=0)
    mu = np.where(mask, Y, 0.0).sum(axis=0) / counts
    resid = np.where(mask, Y - mu, 0.0)
    return lambda_max(design, resid, weights)


def lambda_grid(design, response, weights, n_values=50, min_ratio=1e-3):
    """Log-equispaced grid from lambda_max down to ``lambda_max * min_ratio``."""
    if n_values < 2:
        raise DataError("n_values must be at least 2")
    if not 0.0 < min_ratio < 1.0:
        raise DataError("min_ratio must lie in (0, 1)")
    lmax = effective_lambda_max(design, response, weights)
    if lmax <= 0.0:
        raise DataError("lambda_max is zero; the response carries no signal")
    values = np.geomspace(lmax, lmax * min_ratio, n_values)
    return LambdaGrid(values=values, n_values=n_values, min_ratio=min_ratio)


def single_lambda_grid(design, response, weights):
    """Degenerate one-point grid holding only lambda_max."""
    lmax = effective_lambda_max(design, response, weights)
    if lmax <= 0.0:
        raise DataError("lambda_max is zero; the response carries no signal")
    return LambdaGrid(values=np.array([lmax]), n_values=1, min_ratio=1.0)


def solve_path(design, response, grid, weights, options=None, warm=True):
    """Fit the whole grid in decreasing-penalty order with warm starts."""
    response = _as_response(response)
    results = []
    carry = None
    for lam in grid.values:
        try:
            res = fit_model(design, response, float(lam), weights, options,
                            warm_start=carry)
        except Exception as exc:
            raise type(exc)(f"fit failed at lambda={lam:.6g}: {exc}") from exc
        results.append(res)
        if warm:
            carry = res.coefficients
    return results


def prediction_error(response, theta):
    """Held-out error: mean squared error over observed cells (Gaussian) or
    average deviance (binary)."""
    Y, mask = response.values, response.mask
    n_obs = int(mask.sum())
    if n_obs == 0:
        raise DataError("no observed cells to score")
    if response.family == "binary":
        return 2.0 * neg_loglik_binary(Y, mask, theta) / n_obs
    R = np.where(mask, Y - theta, 0.0)
    return float(np.sum(R * R)) / n_obs


def _check_binary_classes(response):
    Y, mask = response.values, response.mask
    ones = np.where(mask, Y, 0.0).sum(axis=0)
    counts = mask.sum(axis=0)
    if ((ones == 0) | (ones == counts)).any():
        j = int(np.argmax((ones == 0) | (ones == counts)))
        raise DataError(f"training fold has a single class in column {j}")


def _fold_errors(design, response, grid, weights, options, tr, va):
    tr_blocks = [b[tr] for b in design.blocks]
    va_blocks = [b[va] for b in design.blocks]
    fold_design = build_design(tr_blocks, center=design.centered,
                               scale=design.scaled,
                               view_names=design.view_names)
    val_design = fold_design.replay(va_blocks)
    resp_tr = response.rows(tr)
    resp_va = response.rows(va)
    if response.family == "binary":
        _check_binary_classes(resp_tr)
    if weights.source == "formula":
        fold_w = compute_weights(fold_design, response.q)
    else:
        fold_w = weights
    fold_grid = grid.rescaled(
        effective_lambda_max(fold_design, resp_tr, fold_w))
    path = solve_path(fold_design, resp_tr, fold_grid, fold_w, options)
    errs = np.empty(grid.n_values)
    for i, res in enumerate(path):
        theta = linear_predictor(val_design, res.coefficients)
        errs[i] = prediction_error(resp_va, theta)
    return errs


def cross_validate(design, response, grid, weights, k=5, options=None,
                   seed=0, folds=None, threads=1):
    """K-fold cross-validation over the grid.

    Folds are contiguous blocks of a seeded shuffle (or an explicit
    assignment vector); each training fold is re-centered on its own rows,
    its grid is re-anchored at its own lambda_max at the shared ratios, and
    the held-out rows are scored through the replayed transform.  A fold
    that cannot be fit (e.g. a single-class binary column) is recorded as
    missing and excluded with a warning.
    """
    response = _as_response(response)
    n = design.n
    if k < 2:
        raise DataError("k must be at least 2")
    if n < k:
        raise DataError(f"cannot split {n} rows into {k} folds")
    if folds is None:
        perm = np.random.default_rng(seed).permutation(n)
        bounds = np.linspace(0, n, k + 1).astype(int)
        fold_id = np.empty(n, dtype=int)
        for i in range(k):
            fold_id[perm[bounds[i]:bounds[i + 1]]] = i
    else:
        fold_id = np.asarray(folds, dtype=int)
        if fold_id.shape != (n,):
            raise DataError("fold assignment must have one entry per row")
        for i in range(k):
            if not (fold_id == i).any():
                raise DataError(f"fold {i} has zero rows")

    errors = np.full((grid.n_values, k), np.nan)

    def run(i):
        va = fold_id == i
        tr = ~va
        try:
            return i, _fold_errors(design, response, grid, weights, options,
                                   tr, va)
        except DataError as exc:
            warnings.warn(f"fold {i} excluded: {exc}")
            return i, None

    # Solves stay single-threaded inside BLAS so fold results do not depend
    # on the worker count; parallelism happens across folds only.
    with threadpool_limits(limits=1):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outcomes = list(pool.map(run, range(k)))
        else:
            outcomes = [run(i) for i in range(k)]
    for i, errs in outcomes:
        if errs is not None:
            errors[:, i] = errs

    valid = ~np.isnan(errors)
    n_valid = valid.sum(axis=1)
    if (n_valid == 0).any():
        raise DataError("every fold failed; cannot select lambda")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(errors, axis=1)
        sd = np.nanstd(errors, axis=1, ddof=1) if k > 1 else np.zeros_like(mean)
    se = sd / np.sqrt(n_valid)
    best = int(np.nanargmin(mean))
    return CvReport(
        grid=grid,
        fold_errors=errors,
        mean_error=mean,
        se_error=se,
        selected_lambda=float(grid.values[best]),
        selection_rule="min",
    )


def tune_validation(design_train, response_train, design_val, response_val,
                    grid, weights, options=None, return_errors=False):
    """Fit the path on training data and pick the best member on held-out data."""
    response_train = _as_response(response_train)
    response_val = _as_response(response_val)
    if design_val.p != design_train.p or design_val.p_k != design_train.p_k:
        raise DataError("validation design does not match the training columns")
    path = solve_path(design_train, response_train, grid, weights, options)
    errs = np.empty(grid.n_values)
    for i, res in enumerate(path):
        theta = linear_predictor(design_val, res.coefficients)
        errs[i] = prediction_error(response_val, theta)
    best = int(np.argmin(errs))
    if return_errors:
        return path[best], errs
    return path[best]


def adaptive_weights(pilot, eps_factor=1e-8):
    """Reweight by inverse pilot block norms; near-zero blocks get the
    infinite exclusion sentinel.  Returns (weights, kept mask)."""
    norms = pilot.coefficients.frobenius_norms()
    top = float(norms.max())
    if top <= 0.0:
        w = np.full(len(norms), np.inf)
        return PenaltyWeights(w=w, source="adaptive"), norms > 0
    eps = eps_factor * top
    kept = norms > eps
    w = np.where(kept, pilot.weights.w / np.maximum(norms, eps), np.inf)
    return PenaltyWeights(w=w, source="adaptive"), kept


def _null_result(design, response, weights, options, lam):
    q = response.q
    if response.family == "binary":
        mu = null_intercept_binary(response.values, response.mask)
    else:
        counts = response.mask.sum(axis=0)
        mu = np.where(response.mask, response.values, 0.0).sum(axis=0) / counts
    coeffs = BlockCoefficients(intercept=mu,
                               blocks=tuple(np.zeros((pk, q))
                                            for pk in design.p_k),
                               rank_tol=options.rank_tol if options else None)
    if response.family == "binary":
        theta = np.broadcast_to(mu, response.values.shape)
        obj = neg_loglik_binary(response.values, response.mask, theta)
    else:
        obj = masked_objective(design, response.values, response.mask, coeffs,
                               lam, weights)
    return FitResult(coefficients=coeffs, lambda_=lam, weights=weights,
                     iterations=0, converged=True, final_r_primal=0.0,
                     final_r_dual=0.0, objective=obj)


def _expand_result(design, sub_result, kept, full_weights, rank_tol):
    q = sub_result.coefficients.q
    blocks = []
    it = iter(sub_result.coefficients.blocks)
    for k, pk in enumerate(design.p_k):
        blocks.append(next(it) if kept[k] else np.zeros((pk, q)))
    coeffs = BlockCoefficients(intercept=sub_result.coefficients.intercept,
                               blocks=tuple(blocks), rank_tol=rank_tol)
    return FitResult(
        coefficients=coeffs,
        lambda_=sub_result.lambda_,
        weights=full_weights,
        iterations=sub_result.iterations,
        converged=sub_result.converged,
        final_r_primal=sub_result.final_r_primal,
        final_r_dual=sub_result.final_r_dual,
        objective=sub_result.objective,
        objective_trace=sub_result.objective_trace,
    )


def adaptive_refit(design, response, pilot, grid, options=None, validation=None,
                   k=5, seed=0, eps_factor=1e-8):
    """Re-tune with weights divided by pilot block norms.

    Views whose pilot norm is (numerically) zero are dropped from the refit
    and their coefficients pinned to exact zero.  Selection uses a held-out
    ``validation=(design_val, response_val)`` pair when given, otherwise
    K-fold cross-validation.  If every view is excluded the null model is
    returned with a warning.
    """
    response = _as_response(response)
    options = options or SolverOptions()
    if pilot.coefficients.p != design.p:
        raise DataError("pilot was not fitted on this design")
    new_w, kept = adaptive_weights(pilot, eps_factor)
    if not kept.any():
        warnings.warn("all views excluded by the adaptive rule; "
                      "returning the null model")
        return _null_result(design, response, new_w, options,
                            float(grid.values[0]))
    kept_idx = np.flatnonzero(kept)
    sub = design.subset_views(kept_idx)
    sub_w = PenaltyWeights(w=new_w.w[kept], source="adaptive")
    sub_grid = grid.rescaled(effective_lambda_max(sub, response, sub_w))
    if validation is not None:
        design_val, response_val = validation
        val_sub = design_val.subset_views(kept_idx)
        res = tune_validation(sub, response, val_sub, response_val, sub_grid,
                              sub_w, options)
    else:
        report = cross_validate(sub, response, sub_grid, sub_w, k=k,
                                options=options, seed=seed)
        res = fit_model(sub, response, report.selected_lambda, sub_w, options)
    return _expand_result(design, res, kept, new_w,
                          options.rank_tol if options else None)
