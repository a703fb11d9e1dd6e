"""Binary-response fitting and missing-response handling.

Binary fits replace the squared loss with the logistic negative
log-likelihood, quadratically majorized at the current natural parameters so
each outer step reduces to one weighted least-squares ADMM iteration on a
working response.  Missing cells (either family) are filled with current
fitted values, which majorizes the observed-cell loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import (
    BlockCoefficients,
    DataError,
    _as_matrix,
    linear_predictor,
    masked_objective,
)
from .solver import AdmmEngine, FitResult, SolverOptions

# Curvature bound of the logistic loss: the majorizer is
# -log h(e0) - 2(1-h(e0))^2 + (1/8)(e - e0 - 4(1-h(e0)))^2, so the working
# least-squares loss carries a fixed 1/8 in place of the Gaussian 1/(2n).
_BINARY_LOSS_N = 4.0


@dataclass(frozen=True)
class NaturalParams:
    """Natural parameter matrix ``1 mu' + X B`` with its paired intercept."""

    theta: np.ndarray
    intercept: np.ndarray

    def __post_init__(self):
        theta = _as_matrix(self.theta, "theta")
        if not np.isfinite(theta).all():
            raise DataError("natural parameters must be finite")
        theta = theta.copy()
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @classmethod
    def from_coefficients(cls, design, coeffs):
        return cls(theta=linear_predictor(design, coeffs),
                   intercept=coeffs.intercept)

    def probabilities(self):
        return expit(self.theta)


def neg_loglik_binary(Y, mask, theta):
    """Negative Bernoulli log-likelihood over observed cells.

    Uses the ``log(1 + exp(-z))`` form with ``z = (2y - 1) theta``, which is
    overflow-safe for any magnitude of theta.
    """
    Y = _as_matrix(Y, "Y")
    theta = _as_matrix(theta, "theta")
    if mask is not None:
        Y = np.where(mask, Y, 0.0)
        theta = np.where(mask, theta, 0.0)
    terms = np.logaddexp(0.0, -(2.0 * Y - 1.0) * theta)
    if mask is not None:
        terms = np.where(mask, terms, 0.0)
    return float(terms.sum())


def working_response(Y, theta_tilde):
    """Quadratic-majorization target ``theta + 4 (2y-1) (1 - h((2y-1) theta))``."""
    Y = np.asarray(Y, dtype=float)
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    sign = 2.0 * Y - 1.0
    return theta_tilde + 4.0 * sign * expit(-sign * theta_tilde)


def majorizer_gap(eta, eta0):
    """Majorizer minus loss; nonnegative everywhere, zero at ``eta == eta0``."""
    eta = np.asarray(eta, dtype=float)
    eta0 = np.asarray(eta0, dtype=float)
    one_minus_h = expit(-eta0)
    rhs = (np.logaddexp(0.0, -eta0)
           - 2.0 * one_minus_h ** 2
           + 0.125 * (eta - eta0 - 4.0 * one_minus_h) ** 2)
    return rhs - np.logaddexp(0.0, -eta)


def complete_surrogate(Y_or_Ystar, theta_tilde, mask):
    """Copy observed cells, fill missing ones with current fitted values."""
    return np.where(mask, Y_or_Ystar, theta_tilde)


def _full_mask(Y, mask):
    if mask is None:
        return np.ones(Y.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != Y.shape:
        raise DataError("mask shape does not match Y")
    return mask


def fit_binary(design, Y, mask, lam, weights, options=None, warm_start=None):
    """Binary-response fit via majorization-minimization.

    Each outer iteration rebuilds the working response at the current natural
    parameters, refreshes the closed-form intercept, and runs exactly one
    ADMM sweep on the resulting least-squares problem.  Stops when the ADMM
    residual rule holds and the deviance has stabilized.
    """
    options = options or SolverOptions()
    Y = _as_matrix(Y, "Y")
    if Y.shape[0] != design.n:
        raise DataError(f"Y has {Y.shape[0]} rows, design has {design.n}")
    mask = _full_mask(Y, mask)
    obs = Y[mask]
    if not np.isfinite(obs).all():
        raise DataError("observed response entries must be finite")
    if not np.isin(obs, (0.0, 1.0)).all():
        raise DataError("binary responses must be 0/1 on observed cells")
    n_obs = int(mask.sum())
    if n_obs == 0:
        raise DataError("no observed response cells")

    engine = AdmmEngine(design, lam, weights, options,
                        loss_n=_BINARY_LOSS_N, warm_start=warm_start)
    X = design.matrix
    theta = np.zeros(Y.shape)
    mu = np.zeros(Y.shape[1])
    trace = []
    dev_prev = None
    dev_stable = False
    for _ in range(options.max_outer):
        ystar = working_response(Y, theta)
        yfill = complete_surrogate(ystar, theta, mask)
        mu = yfill.mean(axis=0)
        engine.iterate(yfill - mu)
        theta = mu + X @ engine.A
        nll = neg_loglik_binary(Y, mask, theta)
        trace.append(nll + engine.penalty)
        dev = 2.0 * nll / n_obs
        if dev_prev is not None:
            dev_stable = abs(dev - dev_prev) <= 1e-6 * max(1.0, abs(dev_prev))
        dev_prev = dev
        if dev_stable and engine.converged():
            break

    coeffs = BlockCoefficients(intercept=mu,
                               blocks=tuple(design.split(engine.A)),
                               rank_tol=options.rank_tol)
    # For binary fits the reported objective is the penalized negative
    # log-likelihood rather than the squared-loss form.
    return FitResult(
        coefficients=coeffs,
        lambda_=lam,
        weights=weights,
        iterations=engine.iterations,
        converged=dev_stable and engine.converged(),
        final_r_primal=engine.r_primal,
        final_r_dual=engine.r_dual,
        objective=trace[-1],
        objective_trace=tuple(trace),
    )


def fit_gaussian_missing(design, Y, mask, lam, weights, options=None,
                         warm_start=None, fit_intercept=True):
    """Gaussian fit with missing response cells.

    Every ADMM iteration first fills missing cells with the current fitted
    values and then performs the standard sweep; with an all-true mask the
    iterate sequence is identical to :func:`mvrr.solver.fit_gaussian`.
    """
    options = options or SolverOptions()
    Y = _as_matrix(Y, "Y")
    if Y.shape[0] != design.n:
        raise DataError(f"Y has {Y.shape[0]} rows, design has {design.n}")
    mask = _full_mask(Y, mask)
    if not np.isfinite(Y[mask]).all():
        raise DataError("observed response entries must be finite")
    q = Y.shape[1]

    engine = AdmmEngine(design, lam, weights, options, warm_start=warm_start)
    X = design.matrix
    theta = np.zeros(Y.shape)
    mu = np.zeros(q)
    for _ in range(options.max_iter):
        yfill = complete_surrogate(Y, theta, mask)
        mu = yfill.mean(axis=0) if fit_intercept else np.zeros(q)
        engine.iterate(yfill - mu)
        theta = mu + X @ engine.A
        if engine.converged():
            break

    coeffs = BlockCoefficients(intercept=mu,
                               blocks=tuple(design.split(engine.A)),
                               rank_tol=options.rank_tol)
    obj = masked_objective(design, Y, mask, coeffs, lam, weights)
    return FitResult(
        coefficients=coeffs,
        lambda_=lam,
        weights=weights,
        iterations=engine.iterations,
        converged=engine.converged(),
        final_r_primal=engine.r_primal,
        final_r_dual=engine.r_dual,
        objective=obj,
        objective_trace=tuple(engine.objective_trace),
    )


def null_intercept_binary(Y, mask, clip=1e-6):
    """Closed-form null-model intercept: column logits of observed means."""
    Y = _as_matrix(Y, "Y")
    mask = _full_mask(Y, mask)
    counts = mask.sum(axis=0)
    if (counts == 0).any():
        raise DataError("a response column has no observed entries")
    pbar = np.where(mask, Y, 0.0).sum(axis=0) / counts
    pbar = np.clip(pbar, clip, 1.0 - clip)
    return np.log(pbar / (1.0 - pbar))


def lambda_max_binary(design, Y, mask, weights):
    """Smallest penalty freezing B at zero in the binary fit.

    At the null model the loss gradient for view k is
    ``X_k' (P - Y)`` over observed cells, so zero is stationary once
    ``lam * w_k`` dominates its spectral norm.
    """
    Y = _as_matrix(Y, "Y")
    mask = _full_mask(Y, mask)
    mu = null_intercept_binary(Y, mask)
    resid = np.where(mask, Y - expit(mu)[None, :], 0.0)
    best = 0.0
    for k, b in enumerate(design.blocks):
        if weights.w[k] == np.inf:
            continue
        top = np.linalg.svd(b.T @ resid, compute_uv=False)[0]
        best = max(best, top / weights.w[k])
    return float(best)


def fit_model(design, response, lam, weights, options=None, warm_start=None):
    """Family/mask dispatch used by the tuning and CLI layers."""
    if response.family == "binary":
        return fit_binary(design, response.values, response.mask, lam,
                          weights, options, warm_start=warm_start)
    if response.complete:
        from .solver import fit_gaussian
        return fit_gaussian(design, response.values, lam, weights, options,
                            warm_start=warm_start)
    return fit_gaussian_missing(design, response.values, response.mask, lam,
                                weights, options, warm_start=warm_start)
