"""ADMM solver for the composite nuclear-norm penalized least-squares fit.

The problem is split as ``min (1/2n)|Y - sum_k X_k B_k|^2 + lam sum_k w_k |A_k|_*``
subject to ``A_k = B_k``.  Each iteration solves a ridge-type system for B,
applies singular-value soft-thresholding per view for A, and takes a dual
ascent step on the multipliers.  The step size rho grows geometrically up to
a cap, and the Gram factorization is redone only when rho changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import (
    BlockCoefficients,
    DataError,
    NumericalError,
    _as_matrix,
    build_design,
    objective as penalized_objective,
)


@dataclass(frozen=True)
class SolverOptions:
    rho0: float = 0.1
    rho_growth: float = 1.1
    rho_max: float = 1e4
    tol: float = 1e-4
    max_iter: int = 1000
    max_outer: int = 500
    ridge_lambda2: float = 0.0
    rank_tol: float | None = None

    def __post_init__(self):
        if self.rho0 <= 0:
            raise DataError("rho0 must be positive")
        if not 1.0 <= self.rho_growth <= 2.0:
            raise DataError("rho_growth must lie in [1, 2]")
        if self.rho_max < self.rho0:
            raise DataError("rho_max must be at least rho0")
        if self.tol <= 0:
            raise DataError("tol must be positive")
        if self.max_iter < 1 or self.max_outer < 1:
            raise DataError("iteration caps must be at least 1")
        if self.ridge_lambda2 < 0:
            raise DataError("ridge_lambda2 must be nonnegative")


@dataclass
class SolverState:
    """ADMM triple plus step size, residuals and the objective trace."""

    A: list
    B: list
    Lambda: list
    rho: float
    iter: int
    r_primal: float
    r_dual: float
    objective_trace: list = field(default_factory=list)


@dataclass(frozen=True)
class FitResult:
    coefficients: BlockCoefficients
    lambda_: float
    weights: object
    iterations: int
    converged: bool
    final_r_primal: float
    final_r_dual: float
    objective: float
    objective_trace: tuple = ()


def svt(M, tau):
    """Singular value soft-thresholding: ``U (D - tau)_+ V'``."""
    M = _as_matrix(M, "matrix")
    if not np.isfinite(M).all():
        raise NumericalError("svt input has non-finite entries")
    if tau < 0:
        raise DataError("threshold must be nonnegative")
    if tau == 0.0:
        return M.copy()
    U, d, Vt = np.linalg.svd(M, full_matrices=False)
    d = np.maximum(d - tau, 0.0)
    keep = d > 0
    if not keep.any():
        return np.zeros_like(M)
    return (U[:, keep] * d[keep]) @ Vt[keep]


def _prox_nuclear(M, tau):
    """Nuclear-norm prox returning (matrix, thresholded singular values).

    Width- or height-1 blocks reduce to vector soft-thresholding, which
    avoids the SVD entirely.
    """
    if tau == 0.0:
        s = np.linalg.svd(M, compute_uv=False) if min(M.shape) > 1 \
            else np.array([np.linalg.norm(M)])
        return M.copy(), s
    if min(M.shape) == 1:
        nrm = np.linalg.norm(M)
        kept = max(nrm - tau, 0.0)
        if kept == 0.0 or nrm == 0.0:
            return np.zeros_like(M), np.array([0.0])
        return M * (kept / nrm), np.array([kept])
    U, d, Vt = np.linalg.svd(M, full_matrices=False)
    d = np.maximum(d - tau, 0.0)
    keep = d > 0
    if not keep.any():
        return np.zeros_like(M), d
    return (U[:, keep] * d[keep]) @ Vt[keep], d


def augmented_lagrangian(state, design, Y, lam, weights):
    """Value of the splitting objective at the given state."""
    Y = _as_matrix(Y, "Y")
    B = np.vstack(state.B)
    R = Y - design.matrix @ B
    total = 0.5 * float(np.sum(R * R)) / design.n
    for k in range(design.K):
        Ak = state.A[k]
        Bk = state.B[k]
        Lk = state.Lambda[k]
        nuc = np.linalg.svd(Ak, compute_uv=False).sum() if Ak.size else 0.0
        diff = Ak - Bk
        total += lam * weights.w[k] * float(nuc)
        total += float(np.sum(Lk * diff))
        total += 0.5 * state.rho * float(np.sum(diff * diff))
    return total


def primal_B_update(design, Y, A_tilde, Lambda_tilde, rho):
    """Solve ``(X'X/n + rho I) B = X'Y/n + rho A~ + L~``."""
    if rho <= 0:
        raise DataError("rho must be positive")
    Y = _as_matrix(Y, "Y")
    At = np.vstack(A_tilde)
    Lt = np.vstack(Lambda_tilde)
    if not (np.isfinite(At).all() and np.isfinite(Lt).all() and np.isfinite(Y).all()):
        raise NumericalError("non-finite inputs to the B update")
    gram = _GramSolver(design.matrix, design.n, 0.0)
    gram.factor(rho)
    rhs = design.matrix.T @ Y / design.n + rho * At + Lt
    B = gram.solve(rhs)
    return design.split(B)


def primal_A_update(B_hat, Lambda_tilde, rho, lam, weights):
    """Per-view prox step ``A_k = svt(B_k - L_k / rho, lam w_k / rho)``."""
    if rho <= 0:
        raise DataError("rho must be positive")
    out = []
    for k, (Bk, Lk) in enumerate(zip(B_hat, Lambda_tilde)):
        Ak, _ = _prox_nuclear(Bk - Lk / rho, lam * weights.w[k] / rho)
        out.append(Ak)
    return out


def dual_update(Lambda_tilde, A_hat, B_hat, rho):
    """Ascent step ``L_k + rho (A_k - B_k)``."""
    return [Lk + rho * (Ak - Bk)
            for Lk, Ak, Bk in zip(Lambda_tilde, A_hat, B_hat)]


def residuals(A_hat, B_hat, B_prev, rho):
    """Primal residual ``|A - B|_F`` and dual residual ``rho |B - B~|_F``."""
    rp = np.sqrt(sum(float(np.sum((Ak - Bk) ** 2))
                     for Ak, Bk in zip(A_hat, B_hat)))
    rd = rho * np.sqrt(sum(float(np.sum((Bk - Pk) ** 2))
                           for Bk, Pk in zip(B_hat, B_prev)))
    return rp, rd


class _GramSolver:
    """Factorized solves of ``(X'X/m + shift I) Z = R``.

    Uses a p x p Cholesky when p <= n, and the matrix-inversion identity
    through an n x n Cholesky otherwise.  ``shift`` is rho plus twice the
    ridge penalty; refactoring happens only when it changes.
    """

    def __init__(self, X, m, ridge_lambda2):
        self.X = X
        self.m = float(m)
        self.ridge_shift = 2.0 * ridge_lambda2
        n, p = X.shape
        self.wide = p > n
        if self.wide:
            self.gram = X @ X.T
        else:
            self.gram = X.T @ X / self.m
        self._shift = None
        self._chol = None

    def factor(self, rho):
        shift = rho + self.ridge_shift
        if shift == self._shift:
            return
        G = self.gram.copy()
        if self.wide:
            G[np.diag_indices_from(G)] += self.m * shift
        else:
            G[np.diag_indices_from(G)] += shift
        self._chol = scipy.linalg.cho_factor(G, lower=True)
        self._shift = shift

    def solve(self, R):
        if self.wide:
            inner = scipy.linalg.cho_solve(self._chol, self.X @ R)
            return (R - self.X.T @ inner) / self._shift
        return scipy.linalg.cho_solve(self._chol, R)


class AdmmEngine:
    """Mutable iteration state over a fixed design.

    The target matrix may change between iterations (working responses,
    missing-cell refills); the engine recomputes ``X'Y`` only when handed a
    different array object.
    """

    def __init__(self, design, lam, weights, options, loss_n=None,
                 warm_start=None):
        if lam < 0:
            raise DataError("lambda must be nonnegative")
        if len(weights.w) != design.K:
            raise DataError("weights length does not match the number of views")
        if not np.isfinite(weights.w).all():
            raise DataError("excluded views must be dropped before solving")
        self.design = design
        self.lam = lam
        self.w = weights.w
        self.options = options
        self.n_loss = float(loss_n if loss_n is not None else design.n)
        self.gram = _GramSolver(design.matrix, self.n_loss,
                                options.ridge_lambda2)
        self.rho = options.rho0
        if warm_start is not None:
            if warm_start.p != design.p:
                raise DataError("warm start does not match the design")
            self.B = np.array(warm_start.stacked)
            self.A = self.B.copy()
        else:
            self.B = None
            self.A = None
        self.Lam = None
        self._yc = None
        self._xty = None
        self.iterations = 0
        self.r_primal = np.inf
        self.r_dual = np.inf
        self.B_norm = 0.0
        self.penalty = 0.0
        self.objective_trace = []

    def _ensure_state(self, q):
        if self.B is None:
            self.B = np.zeros((self.design.p, q))
            self.A = np.zeros((self.design.p, q))
        elif self.B.shape[1] != q:
            raise DataError(f"warm start has {self.B.shape[1]} response "
                            f"columns, target has {q}")
        if self.Lam is None:
            self.Lam = np.zeros((self.design.p, q))

    def iterate(self, Yc):
        """One full primal/dual sweep against the (centered) target."""
        self._ensure_state(Yc.shape[1])
        if Yc is not self._yc:
            self._xty = self.design.matrix.T @ Yc / self.n_loss
            self._yc = Yc
        self.gram.factor(self.rho)
        rho = self.rho

        B_prev = self.B
        B = self.gram.solve(self._xty + rho * self.A + self.Lam)
        if not np.isfinite(B).all():
            raise NumericalError("ADMM produced non-finite iterates")

        A = np.empty_like(B)
        penalty = 0.0
        for k, sl in enumerate(self.design.view_slices):
            Ak, svals = _prox_nuclear(B[sl] - self.Lam[sl] / rho,
                                      self.lam * self.w[k] / rho)
            A[sl] = Ak
            penalty += self.w[k] * float(svals.sum())
        penalty *= self.lam

        self.Lam = self.Lam + rho * (A - B)
        self.r_primal = float(np.linalg.norm(A - B))
        self.r_dual = float(rho * np.linalg.norm(B - B_prev))
        self.B = B
        self.A = A
        self.B_norm = float(np.linalg.norm(B))
        self.penalty = penalty
        self.iterations += 1

        R = Yc - self.design.matrix @ A
        obj = 0.5 * float(np.sum(R * R)) / self.n_loss + penalty
        self.objective_trace.append(obj)

        # Residual balancing keeps the two residuals within a factor of ten
        # of each other; an unconditionally growing rho freezes the dual
        # residual once it caps out.  rho stays inside [rho0, rho_max].
        growth = self.options.rho_growth
        if growth > 1.0:
            if self.r_primal > 10.0 * self.r_dual:
                self.rho = min(self.rho * growth, self.options.rho_max)
            elif self.r_dual > 10.0 * self.r_primal:
                self.rho = max(self.rho / growth, self.options.rho0)
        return obj

    def converged(self):
        thr = self.options.tol * max(1.0, self.B_norm)
        return self.r_primal <= thr and self.r_dual <= thr

    def state(self):
        return SolverState(
            A=self.design.split(self.A),
            B=self.design.split(self.B),
            Lambda=self.design.split(self.Lam),
            rho=self.rho,
            iter=self.iterations,
            r_primal=self.r_primal,
            r_dual=self.r_dual,
            objective_trace=list(self.objective_trace),
        )

    def result(self, design, Y, intercept, weights):
        coeffs = BlockCoefficients(
            intercept=intercept,
            blocks=tuple(design.split(self.A)),
            rank_tol=self.options.rank_tol,
        )
        obj = penalized_objective(design, Y, coeffs, self.lam, weights)
        return FitResult(
            coefficients=coeffs,
            lambda_=self.lam,
            weights=weights,
            iterations=self.iterations,
            converged=self.converged(),
            final_r_primal=self.r_primal,
            final_r_dual=self.r_dual,
            objective=obj,
            objective_trace=tuple(self.objective_trace),
        )


def fit_gaussian(design, Y, lam, weights, options=None, warm_start=None,
                 fit_intercept=True, loss_n=None):
    """Fit the penalized least-squares model on a complete response matrix.

    The response is centered column-wise (the intercept) before iterating;
    non-convergence within ``max_iter`` is reported, not raised.
    """
    options = options or SolverOptions()
    Y = _as_matrix(Y, "Y")
    if Y.shape[0] != design.n:
        raise DataError(f"Y has {Y.shape[0]} rows, design has {design.n}")
    if not np.isfinite(Y).all():
        raise DataError("Y contains non-finite entries; use the masked fit")
    mu = Y.mean(axis=0) if fit_intercept else np.zeros(Y.shape[1])
    Yc = Y - mu
    engine = AdmmEngine(design, lam, weights, options, loss_n=loss_n,
                        warm_start=warm_start)
    for _ in range(options.max_iter):
        engine.iterate(Yc)
        if engine.converged():
            break
    return engine.result(design, Y, mu, weights)


def augment_ridge(design, Y, lambda2):
    """Stack ``sqrt(2 n lambda2) I`` under X and zeros under Y.

    Fitting the plain nuclear-norm problem on the result, with the loss still
    divided by the original n (``loss_n=design.n``) and no intercept, equals
    adding ``lambda2 |B|_F^2`` to the original objective.
    """
    if lambda2 < 0:
        raise DataError("lambda2 must be nonnegative")
    Y = _as_matrix(Y, "Y")
    n, p, q = design.n, design.p, Y.shape[1]
    c = np.sqrt(2.0 * n * lambda2)
    eye = c * np.eye(p)
    blocks = [np.vstack([b, eye[:, sl]])
              for b, sl in zip(design.blocks, design.view_slices)]
    Y_aug = np.vstack([Y, np.zeros((p, q))])
    design_aug = build_design(blocks, center=False, scale=False,
                              view_names=design.view_names)
    return design_aug, Y_aug
