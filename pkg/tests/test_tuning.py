import numpy as np
import pytest

from mvrr import (
    BlockCoefficients,
    DataError,
    FitResult,
    PenaltyWeights,
    ResponseData,
    SolverOptions,
    adaptive_refit,
    adaptive_weights,
    build_design,
    compute_weights,
    cross_validate,
    fit_gaussian,
    lambda_grid,
    linear_predictor,
    solve_path,
    tune_validation,
)
from mvrr.tuning import effective_lambda_max, single_lambda_grid


def _problem(rng, n=40, dims=(5, 4), q=6, rank=2, noise=1.0, zero_view=False):
    blocks = [rng.standard_normal((n, p)) for p in dims]
    design = build_design(blocks, center=True)
    parts = []
    for i, p in enumerate(dims):
        if zero_view and i == len(dims) - 1:
            parts.append(np.zeros((p, q)))
        else:
            parts.append(rng.standard_normal((p, rank))
                         @ rng.standard_normal((rank, q)))
    B0 = np.vstack(parts)
    Y = design.matrix @ B0 + noise * rng.standard_normal((n, q))
    return design, ResponseData(Y), compute_weights(design, q), B0


# ------------------------------------------------------------------ grid

def test_grid_endpoints(rng):
    design, resp, w, _ = _problem(rng)
    grid = lambda_grid(design, resp, w, n_values=2, min_ratio=0.01)
    lmax = effective_lambda_max(design, resp, w)
    np.testing.assert_allclose(grid.values, [lmax, 0.01 * lmax], rtol=1e-12)


def test_grid_log_spacing(rng):
    design, resp, w, _ = _problem(rng)
    grid = lambda_grid(design, resp, w, n_values=20, min_ratio=1e-3)
    ratios = grid.values[1:] / grid.values[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)
    assert grid.values[-1] / grid.values[0] == pytest.approx(1e-3, rel=1e-12)


def test_grid_head_gives_null_model(rng):
    design, resp, w, _ = _problem(rng)
    grid = lambda_grid(design, resp, w, n_values=50, min_ratio=1e-3)
    res = fit_gaussian(design, resp.values, grid.values[0], w)
    assert np.all(res.coefficients.stacked == 0.0)


def test_grid_zero_response_rejected(rng):
    design, _, w, _ = _problem(rng)
    resp = ResponseData(np.zeros((design.n, 3)))
    with pytest.raises(DataError, match="signal"):
        lambda_grid(design, resp, w)


def test_grid_validation(rng):
    design, resp, w, _ = _problem(rng)
    with pytest.raises(DataError):
        lambda_grid(design, resp, w, n_values=1)
    with pytest.raises(DataError):
        lambda_grid(design, resp, w, min_ratio=1.5)
    single = single_lambda_grid(design, resp, w)
    assert single.n_values == 1


# ------------------------------------------------------------------ path

def test_path_zero_prefix(rng):
    design, resp, w, _ = _problem(rng)
    lmax = effective_lambda_max(design, resp, w)
    from mvrr.tuning import LambdaGrid
    grid = LambdaGrid(values=lmax * np.array([2.0, 1.5, 1.0, 0.01]),
                      n_values=4, min_ratio=0.005)
    path = solve_path(design, resp, grid, w)
    for res in path[:3]:
        assert np.all(res.coefficients.stacked == 0.0)
    assert np.linalg.norm(path[3].coefficients.stacked) > 0


def test_path_cross_evaluation_optimality(rng):
    from mvrr import objective
    design, resp, w, _ = _problem(rng)
    grid = lambda_grid(design, resp, w, n_values=6, min_ratio=0.01)
    opts = SolverOptions(tol=1e-7, max_iter=4000)
    path = solve_path(design, resp, grid, w, opts)
    for i, lam in enumerate(grid.values):
        own = objective(design, resp.values, path[i].coefficients, lam, w)
        for j in (i - 1, i + 1):
            if 0 <= j < len(path):
                other = objective(design, resp.values,
                                  path[j].coefficients, lam, w)
                assert own <= other + 1e-8 * max(1.0, abs(other))


def test_warm_equals_cold(rng):
    design, resp, w, _ = _problem(rng)
    grid = lambda_grid(design, resp, w, n_values=3, min_ratio=0.05)
    opts = SolverOptions(ridge_lambda2=1e-4, tol=1e-9, max_iter=8000)
    warm = solve_path(design, resp, grid, w, opts, warm=True)
    cold = solve_path(design, resp, grid, w, opts, warm=False)
    for a, b in zip(warm, cold):
        np.testing.assert_allclose(a.coefficients.stacked,
                                   b.coefficients.stacked, atol=1e-6)


def test_path_penalty_monotone(rng):
    design, resp, w, _ = _problem(rng)
    grid = lambda_grid(design, resp, w, n_values=12, min_ratio=1e-3)
    opts = SolverOptions(ridge_lambda2=1e-4, tol=1e-7, max_iter=4000)
    path = solve_path(design, resp, grid, w, opts)
    pen = [float(np.sum(w.w * r.coefficients.nuclear_norms)) for r in path]
    diffs = np.diff(pen)
    assert np.all(diffs >= -1e-8 * np.maximum(1.0, np.abs(pen[:-1])))


def test_grid_must_decrease():
    from mvrr.tuning import LambdaGrid
    with pytest.raises(DataError):
        LambdaGrid(values=np.array([1.0, 2.0]), n_values=2, min_ratio=0.5)
    with pytest.raises(DataError):
        LambdaGrid(values=np.array([1.0, -0.5]), n_values=2, min_ratio=0.5)


def test_path_tags_failing_lambda(rng):
    design, resp, _, _ = _problem(rng)
    from mvrr.tuning import LambdaGrid
    grid = LambdaGrid(values=np.array([1.0, 0.5]), n_values=2, min_ratio=0.5)
    bad_w = PenaltyWeights(np.array([np.inf, 1.0]), "adaptive")
    with pytest.raises(DataError, match="lambda=1"):
        solve_path(design, resp, grid, bad_w)


# --------------------------------------------------------------------- cv

def test_cv_null_grid_mean_error_is_heldout_variance(rng):
    design, resp, w, _ = _problem(rng, n=36)
    grid = single_lambda_grid(design, resp, w)
    report = cross_validate(design, resp, grid, w, k=3, seed=4)
    # oracle: recompute fold errors of the train-mean predictor directly
    perm = np.random.default_rng(4).permutation(design.n)
    bounds = np.linspace(0, design.n, 4).astype(int)
    fold_id = np.empty(design.n, dtype=int)
    for i in range(3):
        fold_id[perm[bounds[i]:bounds[i + 1]]] = i
    Y = resp.values
    expected = []
    for i in range(3):
        va = fold_id == i
        mu = Y[~va].mean(axis=0)
        expected.append(np.mean((Y[va] - mu) ** 2))
    np.testing.assert_allclose(report.fold_errors[0], expected, rtol=1e-10)
    assert report.selected_lambda == grid.values[0]


def test_cv_leave_one_out_smoke(rng):
    design, resp, w, _ = _problem(rng, n=12, dims=(3, 2), q=3)
    grid = lambda_grid(design, resp, w, n_values=4, min_ratio=0.05)
    report = cross_validate(design, resp, grid, w, k=12, seed=0)
    assert report.selected_lambda in grid.values
    assert np.isfinite(report.mean_error).all()


def test_cv_duplicated_rows_symmetric(rng):
    design0, resp0, w, _ = _problem(rng, n=18)
    blocks = [np.vstack([b, b]) for b in design0.blocks]
    design = build_design(blocks, center=True)
    Y2 = np.vstack([resp0.values, resp0.values])
    resp = ResponseData(Y2)
    grid = lambda_grid(design, resp, w, n_values=5, min_ratio=0.05)
    folds = np.r_[np.zeros(18, dtype=int), np.ones(18, dtype=int)]
    report = cross_validate(design, resp, grid, w, k=2, folds=folds)
    np.testing.assert_allclose(report.fold_errors[:, 0],
                               report.fold_errors[:, 1], rtol=1e-10)


def test_cv_deterministic_and_thread_invariant(rng):
    design, resp, w, _ = _problem(rng, n=30)
    grid = lambda_grid(design, resp, w, n_values=6, min_ratio=0.02)
    a = cross_validate(design, resp, grid, w, k=5, seed=7)
    b = cross_validate(design, resp, grid, w, k=5, seed=7)
    c = cross_validate(design, resp, grid, w, k=5, seed=7, threads=3)
    assert np.array_equal(a.fold_errors, b.fold_errors)
    assert np.array_equal(a.fold_errors, c.fold_errors)
    assert a.selected_lambda == b.selected_lambda == c.selected_lambda


def test_cv_binary_single_class_fold_excluded(rng):
    n = 24
    blocks = [rng.standard_normal((n, 3))]
    design = build_design(blocks, center=True)
    Y = (rng.random((n, 2)) < 0.5).astype(float)
    Y[:12, 0] = 1.0  # fold 0 trains on rows 12.. where col 0 is mixed;
    Y[12:, 0] = 1.0  # make the column single-class everywhere
    resp = ResponseData(Y, family="binary")
    w = compute_weights(design, 2)
    grid = single_lambda_grid(design, resp, w)
    folds = np.r_[np.zeros(12, dtype=int), np.ones(12, dtype=int)]
    with pytest.warns(UserWarning, match="excluded"):
        with pytest.raises(DataError, match="every fold failed"):
            cross_validate(design, resp, grid, w, k=2, folds=folds)


def test_selection_ties_prefer_larger_lambda(rng):
    # two penalty levels above lambda_max give the identical null model, so
    # the validation errors tie exactly and the larger penalty wins
    design, resp, w, _ = _problem(rng, n=24)
    from mvrr.tuning import LambdaGrid
    lmax = effective_lambda_max(design, resp, w)
    grid = LambdaGrid(values=np.array([4.0, 2.0]) * lmax, n_values=2,
                      min_ratio=0.5)
    best, errs = tune_validation(design, resp, design, resp, grid, w,
                                 return_errors=True)
    assert errs[0] == errs[1]
    assert best.lambda_ == grid.values[0]


def test_cv_argument_validation(rng):
    design, resp, w, _ = _problem(rng, n=10)
    grid = single_lambda_grid(design, resp, w)
    with pytest.raises(DataError):
        cross_validate(design, resp, grid, w, k=1)
    with pytest.raises(DataError):
        cross_validate(design, resp, grid, w, k=11)
    with pytest.raises(DataError, match="zero rows"):
        cross_validate(design, resp, grid, w, k=3,
                       folds=np.zeros(10, dtype=int))


# ------------------------------------------------------------- validation

def test_validation_equals_insample_when_same_data(rng):
    design, resp, w, _ = _problem(rng)
    grid = lambda_grid(design, resp, w, n_values=8, min_ratio=0.01)
    best, errs = tune_validation(design, resp, design, resp, grid, w,
                                 return_errors=True)
    path = solve_path(design, resp, grid, w)
    insample = []
    for res in path:
        theta = linear_predictor(design, res.coefficients)
        insample.append(np.mean((resp.values - theta) ** 2))
    assert best.lambda_ == grid.values[int(np.argmin(insample))]
    np.testing.assert_allclose(errs, insample, rtol=1e-12)


def test_validation_zero_signal_selects_heavy_shrinkage():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        blocks = [rng.standard_normal((30, 4)), rng.standard_normal((30, 3))]
        design = build_design(blocks, center=True)
        Y = rng.standard_normal((30, 5))
        resp = ResponseData(Y)
        w = compute_weights(design, 5)
        grid = lambda_grid(design, resp, w, n_values=20, min_ratio=1e-3)
        vb = [rng.standard_normal((30, 4)), rng.standard_normal((30, 3))]
        design_val = design.replay(vb)
        resp_val = ResponseData(rng.standard_normal((30, 5)))
        best = tune_validation(design, resp, design_val, resp_val, grid, w)
        if best.lambda_ >= grid.values[4]:  # top quartile of 20
            hits += 1
    assert hits >= 15


def test_validation_beats_null_on_signal(rng):
    from mvrr import mspe
    design, resp, w, B0 = _problem(rng, n=60, dims=(8, 8), q=10, rank=2)
    grid = lambda_grid(design, resp, w, n_values=25, min_ratio=1e-3)
    vb = [rng.standard_normal((60, 8)), rng.standard_normal((60, 8))]
    design_val = design.replay(vb)
    Yv = np.hstack(vb) @ B0 + rng.standard_normal((60, 10))
    best = tune_validation(design, resp, design_val, ResponseData(Yv),
                           grid, w)
    fit_m = mspe(B0, best.coefficients.stacked, np.eye(design.p))
    null_m = mspe(B0, np.zeros_like(B0), np.eye(design.p))
    assert fit_m < null_m


def test_validation_column_mismatch(rng):
    design, resp, w, _ = _problem(rng)
    other = build_design([np.random.default_rng(0).standard_normal((40, 3))])
    grid = single_lambda_grid(design, resp, w)
    with pytest.raises(DataError, match="columns"):
        tune_validation(design, resp, other, resp, grid, w)


# --------------------------------------------------------------- adaptive

def test_adaptive_weights_uniform_norms_rescale(rng):
    design, resp, w, _ = _problem(rng)
    q = resp.q
    c = 2.5
    blocks = []
    for p in design.p_k:
        M = rng.standard_normal((p, q))
        blocks.append(M * (c / np.linalg.norm(M)))
    pilot = FitResult(
        coefficients=BlockCoefficients(intercept=np.zeros(q),
                                       blocks=tuple(blocks)),
        lambda_=0.1, weights=w, iterations=1, converged=True,
        final_r_primal=0.0, final_r_dual=0.0, objective=0.0)
    new_w, kept = adaptive_weights(pilot)
    assert kept.all()
    np.testing.assert_allclose(new_w.w, w.w / c, rtol=1e-12)
    # fitting with w' at lambda*c equals fitting with w at lambda
    opts = SolverOptions(tol=1e-9, max_iter=6000)
    a = fit_gaussian(design, resp.values, 0.2, w, opts)
    b = fit_gaussian(design, resp.values, 0.2 * c, new_w, opts)
    np.testing.assert_allclose(a.coefficients.stacked,
                               b.coefficients.stacked, atol=1e-6)


def test_adaptive_refit_excludes_zero_pilot_view(rng):
    design, resp, w, _ = _problem(rng, n=50, dims=(5, 4), q=6, zero_view=True)
    grid = lambda_grid(design, resp, w, n_values=10, min_ratio=0.01)
    q = resp.q
    pilot_blocks = [rng.standard_normal((5, q)), np.zeros((4, q))]
    pilot = FitResult(
        coefficients=BlockCoefficients(intercept=np.zeros(q),
                                       blocks=tuple(pilot_blocks)),
        lambda_=0.1, weights=w, iterations=1, converged=True,
        final_r_primal=0.0, final_r_dual=0.0, objective=0.0)
    res = adaptive_refit(design, resp, pilot, grid, k=3, seed=1)
    assert np.all(res.coefficients.blocks[1] == 0.0)
    assert np.isinf(res.weights.w[1])


def test_adaptive_refit_all_excluded_returns_null(rng):
    design, resp, w, _ = _problem(rng)
    q = resp.q
    pilot = FitResult(
        coefficients=BlockCoefficients.zeros(design.p_k, q),
        lambda_=0.1, weights=w, iterations=1, converged=True,
        final_r_primal=0.0, final_r_dual=0.0, objective=0.0)
    grid = lambda_grid(design, resp, w, n_values=5, min_ratio=0.1)
    with pytest.warns(UserWarning, match="null"):
        res = adaptive_refit(design, resp, pilot, grid)
    assert np.all(res.coefficients.stacked == 0.0)
    np.testing.assert_allclose(res.coefficients.intercept,
                               resp.values.mean(axis=0))


def test_adaptive_refit_view_selection_over_replicates():
    # irrelevant third view is pinned to exact zero in most replicates
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        blocks = [rng.standard_normal((60, 6)) for _ in range(3)]
        design = build_design(blocks, center=True)
        q = 5
        B0 = np.vstack([
            rng.standard_normal((6, 2)) @ rng.standard_normal((2, q)),
            rng.standard_normal((6, 2)) @ rng.standard_normal((2, q)),
            np.zeros((6, q)),
        ])
        Y = design.matrix @ B0 + rng.standard_normal((60, q))
        resp = ResponseData(Y)
        w = compute_weights(design, q)
        grid = lambda_grid(design, resp, w, n_values=20, min_ratio=1e-3)
        vb = [rng.standard_normal((60, 6)) for _ in range(3)]
        design_val = design.replay(vb)
        Yv = np.hstack(vb) @ B0 + rng.standard_normal((60, q))
        pilot = tune_validation(design, resp, design_val, ResponseData(Yv),
                                grid, w)
        res = adaptive_refit(design, resp, pilot, grid,
                             validation=(design_val, ResponseData(Yv)))
        if np.all(res.coefficients.blocks[2] == 0.0):
            hits += 1
    assert hits >= 16  # >= 80% of 20


def test_adaptive_refit_requires_matching_pilot(rng):
    design, resp, w, _ = _problem(rng)
    pilot = FitResult(
        coefficients=BlockCoefficients.zeros((3, 3), resp.q),
        lambda_=0.1, weights=w, iterations=1, converged=True,
        final_r_primal=0.0, final_r_dual=0.0, objective=0.0)
    grid = single_lambda_grid(design, resp, w)
    with pytest.raises(DataError, match="pilot"):
        adaptive_refit(design, resp, pilot, grid)
