"""Core data types and shared numerics for multi-view penalized regression.

A design matrix X = (X_1, ..., X_K) concatenates K views measured on the same
n samples.  Each view gets its own coefficient block B_k (p_k x q), and the
penalty is a weighted sum of per-view nuclear norms.  This module owns data
preparation (centering / unit-diagonal scaling), the penalty weights, the
penalized objective, and small structural diagnostics used everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class DataError(ValueError):
    """Input data violates a structural contract (shape, mask, finiteness)."""


class NumericalError(RuntimeError):
    """A computation produced non-finite results."""


def _as_matrix(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise DataError(f"{name} must be 2-dimensional, got shape {M.shape}")
    return M


def numerical_rank(M, rank_tol=None):
    """Count singular values above ``rank_tol * sigma_1``.

    ``rank_tol`` defaults to ``max(M.shape) * eps``, the conventional
    numerical-rank rule.
    """
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    top = s[0]
    if top == 0.0:
        return 0
    if rank_tol is None:
        rank_tol = max(M.shape) * np.finfo(float).eps
    return int(np.count_nonzero(s > rank_tol * top))


@dataclass(frozen=True)
class MultiViewDesign:
    """K-block predictor matrix with cached per-view spectral data.

    ``column_means`` / ``column_scales`` record the affine transform applied
    at construction (zeros / ones when centering / scaling was off), so the
    identical transform can be replayed on held-out rows at prediction time.
    ``column_scales`` are divisors: processed = (raw - mean) / scale.
    """

    blocks: tuple
    view_names: tuple
    n: int
    p: int
    column_means: np.ndarray
    column_scales: np.ndarray
    cached_sigma1: np.ndarray
    cached_rank: np.ndarray
    constant_columns: np.ndarray
    centered: bool
    scaled: bool

    @property
    def K(self):
        return len(self.blocks)

    @property
    def p_k(self):
        return tuple(b.shape[1] for b in self.blocks)

    @cached_property
    def matrix(self):
        """The concatenated n x p design."""
        X = np.hstack(self.blocks)
        X.flags.writeable = False
        return X

    @cached_property
    def view_slices(self):
        slices, start = [], 0
        for b in self.blocks:
            slices.append(slice(start, start + b.shape[1]))
            start += b.shape[1]
        return tuple(slices)

    def split(self, M):
        """Partition a p x q matrix into the per-view blocks."""
        M = np.asarray(M)
        if M.shape[0] != self.p:
            raise DataError(f"expected {self.p} rows to split, got {M.shape[0]}")
        return [M[sl] for sl in self.view_slices]

    def replay(self, raw_blocks):
        """Apply the recorded centering/scaling to new raw rows.

        Returns a new design carrying the same transform record, so chained
        replays stay consistent.  Per-view caches are recomputed for the new
        rows.
        """
        if len(raw_blocks) != self.K:
            raise DataError(
                f"expected {self.K} views to replay, got {len(raw_blocks)}"
            )
        out, start = [], 0
        for k, raw in enumerate(raw_blocks):
            raw = _as_matrix(raw, f"view {k}")
            width = self.blocks[k].shape[1]
            if raw.shape[1] != width:
                raise DataError(
                    f"view {k} has {raw.shape[1]} columns, expected {width}"
                )
            if not np.isfinite(raw).all():
                raise DataError(f"view {k} contains non-finite entries")
            cols = slice(start, start + width)
            out.append((raw - self.column_means[cols]) / self.column_scales[cols])
            start += width
        return _finalize_design(
            out, self.view_names, self.column_means, self.column_scales,
            self.constant_columns, self.centered, self.scaled,
        )

    def subset_views(self, indices):
        """Design restricted to the given views; processed blocks are reused."""
        indices = list(indices)
        if not indices:
            raise DataError("cannot subset to zero views")
        keep = np.zeros(self.p, dtype=bool)
        for k in indices:
            keep[self.view_slices[k]] = True
        return MultiViewDesign(
            blocks=tuple(self.blocks[k] for k in indices),
            view_names=tuple(self.view_names[k] for k in indices),
            n=self.n,
            p=int(keep.sum()),
            column_means=self.column_means[keep],
            column_scales=self.column_scales[keep],
            cached_sigma1=self.cached_sigma1[list(indices)],
            cached_rank=self.cached_rank[list(indices)],
            constant_columns=self.constant_columns[keep],
            centered=self.centered,
            scaled=self.scaled,
        )


def _finalize_design(blocks, names, means, scales, constant, centered, scaled):
    sigma1 = np.empty(len(blocks))
    rank = np.empty(len(blocks), dtype=int)
    frozen = []
    for k, b in enumerate(blocks):
        b = np.ascontiguousarray(b)
        s = np.linalg.svd(b, compute_uv=False)
        sigma1[k] = s[0]
        tol = max(b.shape) * np.finfo(float).eps
        rank[k] = int(np.count_nonzero(s > tol * s[0])) if s[0] > 0 else 0
        b.flags.writeable = False
        frozen.append(b)
    for arr in (means, scales, constant, sigma1, rank):
        arr.flags.writeable = False
    return MultiViewDesign(
        blocks=tuple(frozen),
        view_names=tuple(names),
        n=frozen[0].shape[0],
        p=sum(b.shape[1] for b in frozen),
        column_means=means,
        column_scales=scales,
        cached_sigma1=sigma1,
        cached_rank=rank,
        constant_columns=constant,
        centered=centered,
        scaled=scaled,
    )


def build_design(raw_blocks, center=True, scale=False, view_names=None):
    """Assemble a :class:`MultiViewDesign` from raw per-view matrices.

    Centering subtracts column means; scaling divides each column by
    ``norm/sqrt(n)`` so the Gram matrix X'X/n has unit diagonal.  Columns
    with (numerically) zero variance keep scale 1 and are flagged rather
    than dropped.
    """
    if raw_blocks is None or len(raw_blocks) == 0:
        raise DataError("no predictor blocks given")
    blocks = []
    n = None
    for k, raw in enumerate(raw_blocks):
        b = _as_matrix(raw, f"view {k}").copy()
        if b.shape[0] == 0 or b.shape[1] == 0:
            raise DataError(f"view {k} is empty")
        if n is None:
            n = b.shape[0]
        elif b.shape[0] != n:
            raise DataError(
                f"view {k} has {b.shape[0]} rows, expected {n}"
            )
        if not np.isfinite(b).all():
            raise DataError(f"view {k} contains non-finite entries")
        blocks.append(b)
    if view_names is None:
        view_names = [f"view{k + 1}" for k in range(len(blocks))]
    elif len(view_names) != len(blocks):
        raise DataError("view_names length does not match the number of blocks")

    p = sum(b.shape[1] for b in blocks)
    means = np.zeros(p)
    scales = np.ones(p)
    constant = np.zeros(p, dtype=bool)
    start = 0
    for b in blocks:
        cols = slice(start, start + b.shape[1])
        raw_rms = np.sqrt(np.mean(b * b, axis=0))
        if center:
            means[cols] = b.mean(axis=0)
            b -= means[cols]
        if scale:
            s = np.linalg.norm(b, axis=0) / np.sqrt(n)
            degenerate = s <= 1e-12 * np.maximum(1.0, raw_rms)
            constant[cols] = degenerate
            s = np.where(degenerate, 1.0, s)
            scales[cols] = s
            b /= s
        start += b.shape[1]
    return _finalize_design(blocks, view_names, means, scales, constant,
                            center, scale)


@dataclass(frozen=True)
class PenaltyWeights:
    """Per-view penalty multipliers.

    A weight of ``+inf`` is the exclusion sentinel used only by the adaptive
    refit; everything else must be positive and finite.
    """

    w: np.ndarray
    source: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        w.flags.writeable = False
        object.__setattr__(self, "w", w)
        if self.source not in ("formula", "adaptive", "custom"):
            raise DataError(f"unknown weight source {self.source!r}")
        bad = ~((w > 0) & (np.isfinite(w) | (w == np.inf)))
        if bad.any():
            raise DataError("penalty weights must be positive (inf = excluded)")
        if np.isinf(w).any() and self.source != "adaptive":
            raise DataError("infinite weights are reserved for adaptive refits")


def compute_weights(design, q):
    """Dimension-balancing weights ``sigma1(X_k) (sqrt(q) + sqrt(r(X_k))) / n``."""
    if q < 1:
        raise DataError("q must be at least 1")
    if (design.cached_sigma1 == 0).any():
        k = int(np.argmax(design.cached_sigma1 == 0))
        raise DataError(f"view {k} is identically zero; its weight degenerates")
    w = design.cached_sigma1 * (np.sqrt(q) + np.sqrt(design.cached_rank)) / design.n
    return PenaltyWeights(w=w, source="formula")


@dataclass(frozen=True)
class BlockCoefficients:
    """Intercept plus the per-view coefficient blocks of one fitted model.

    Per-view nuclear norms and numerical ranks are derived at construction
    (at tolerance ``rank_tol``) so downstream reporting never recomputes
    them inconsistently.
    """

    intercept: np.ndarray
    blocks: tuple
    rank_tol: float | None = None
    nuclear_norms: np.ndarray = field(init=False)
    ranks: np.ndarray = field(init=False)

    def __post_init__(self):
        intercept = np.atleast_1d(np.asarray(self.intercept, dtype=float))
        blocks = tuple(_as_matrix(b, "coefficient block") for b in self.blocks)
        q = blocks[0].shape[1]
        norms = np.empty(len(blocks))
        ranks = np.empty(len(blocks), dtype=int)
        for k, b in enumerate(blocks):
            if b.shape[1] != q:
                raise DataError("coefficient blocks disagree on q")
            if not np.isfinite(b).all():
                raise DataError(f"coefficient block {k} has non-finite entries")
            s = np.linalg.svd(b, compute_uv=False)
            norms[k] = s.sum()
            if s[0] == 0.0:
                ranks[k] = 0
            else:
                tol = self.rank_tol
                if tol is None:
                    tol = max(b.shape) * np.finfo(float).eps
                ranks[k] = int(np.count_nonzero(s > tol * s[0]))
            b.flags.writeable = False
        if intercept.shape != (q,):
            raise DataError(f"intercept must have length {q}")
        if not np.isfinite(intercept).all():
            raise DataError("intercept has non-finite entries")
        intercept.flags.writeable = False
        norms.flags.writeable = False
        ranks.flags.writeable = False
        object.__setattr__(self, "intercept", intercept)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "nuclear_norms", norms)
        object.__setattr__(self, "ranks", ranks)

    @property
    def q(self):
        return self.blocks[0].shape[1]

    @property
    def p(self):
        return sum(b.shape[0] for b in self.blocks)

    @cached_property
    def stacked(self):
        B = np.vstack(self.blocks)
        B.flags.writeable = False
        return B

    def frobenius_norms(self):
        return np.array([np.linalg.norm(b) for b in self.blocks])

    @classmethod
    def zeros(cls, p_k, q, rank_tol=None):
        return cls(
            intercept=np.zeros(q),
            blocks=tuple(np.zeros((pk, q)) for pk in p_k),
            rank_tol=rank_tol,
        )


def linear_predictor(design, coeffs):
    """Fitted values ``1 mu' + X B`` for a design (or bare matrix)."""
    X = design.matrix if isinstance(design, MultiViewDesign) else np.asarray(design)
    return coeffs.intercept + X @ coeffs.stacked


def penalty_value(coeffs, weights):
    """Weighted nuclear-norm penalty; exactly-zero blocks contribute nothing
    even under the infinite exclusion sentinel."""
    active = coeffs.nuclear_norms > 0
    return float(np.sum(weights.w[active] * coeffs.nuclear_norms[active]))


def objective(design, Y, coeffs, lam, weights):
    """Penalized least-squares objective
    ``|Y - 1 mu' - X B|_F^2 / (2n) + lam * sum_k w_k |B_k|_*``."""
    Y = _as_matrix(Y, "Y")
    if lam < 0:
        raise DataError("lambda must be nonnegative")
    if Y.shape[0] != design.n:
        raise DataError(f"Y has {Y.shape[0]} rows, design has {design.n}")
    if Y.shape[1] != coeffs.q:
        raise DataError("Y and coefficients disagree on q")
    if coeffs.p != design.p:
        raise DataError("coefficient rows do not match the design")
    if len(weights.w) != design.K:
        raise DataError("weights length does not match the number of views")
    R = Y - coeffs.intercept - design.matrix @ coeffs.stacked
    loss = 0.5 * float(np.sum(R * R)) / design.n
    return loss + lam * penalty_value(coeffs, weights)


def masked_objective(design, Y, mask, coeffs, lam, weights):
    """Penalized objective restricted to observed cells.

    With an all-true mask this reproduces :func:`objective` bit for bit.
    """
    Y = _as_matrix(Y, "Y")
    R = Y - coeffs.intercept - design.matrix @ coeffs.stacked
    R = np.where(mask, R, 0.0)
    loss = 0.5 * float(np.sum(R * R)) / design.n
    return loss + lam * penalty_value(coeffs, weights)


def lambda_max(design, Y, weights):
    """Smallest penalty level at which B = 0 is stationary:
    ``max_k sigma1(X_k' Y / n) / w_k``."""
    Y = _as_matrix(Y, "Y")
    if Y.shape[0] != design.n:
        raise DataError(f"Y has {Y.shape[0]} rows, design has {design.n}")
    best = 0.0
    for k, b in enumerate(design.blocks):
        if weights.w[k] == np.inf:
            continue
        g = b.T @ Y / design.n
        top = np.linalg.svd(g, compute_uv=False)[0] if g.size else 0.0
        best = max(best, top / weights.w[k])
    return float(best)


def naive_df(view_dims, ranks, r0=None):
    """Naive free-parameter counts of the groupwise low-rank, globally
    low-rank, and group-sparse structures.

    ``view_dims`` is a list of (p_k, q) pairs with a common q; ``r0`` is the
    global rank used by the second count (defaults to ``sum(ranks)``).
    """
    if len(view_dims) != len(ranks):
        raise DataError("view_dims and ranks must have equal length")
    q = view_dims[0][1]
    for (pk, qk), r in zip(view_dims, ranks):
        if qk != q:
            raise DataError("all views must share the same q")
        if not 0 <= r <= min(pk, q):
            raise DataError(f"rank {r} exceeds min({pk}, {q})")
    p = sum(pk for pk, _ in view_dims)
    if r0 is None:
        r0 = sum(ranks)
    if not 0 <= r0 <= min(p, q):
        raise DataError(f"global rank {r0} exceeds min({p}, {q})")
    df1 = sum((pk + q - r) * r for (pk, _), r in zip(view_dims, ranks))
    df2 = (p + q - r0) * r0
    df3 = sum(pk * q for (pk, _), r in zip(view_dims, ranks) if r != 0)
    return df1, df2, df3


@dataclass(frozen=True)
class ResponseData:
    """Response matrix with family tag and observation mask (True = observed)."""

    values: np.ndarray
    family: str = "gaussian"
    mask: np.ndarray | None = None

    def __post_init__(self):
        Y = _as_matrix(self.values, "Y")
        if self.family not in ("gaussian", "binary"):
            raise DataError(f"unknown family {self.family!r}")
        mask = self.mask
        if mask is None:
            mask = np.ones(Y.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != Y.shape:
                raise DataError("mask shape does not match Y")
        obs = Y[mask]
        if not np.isfinite(obs).all():
            raise DataError("observed response entries must be finite")
        if not mask.any(axis=0).all():
            j = int(np.argmin(mask.any(axis=0)))
            raise DataError(f"response column {j} has no observed entries")
        if self.family == "binary" and not np.isin(obs, (0.0, 1.0)).all():
            raise DataError("binary responses must be 0/1 on observed cells")
        Y = Y.copy()
        Y.flags.writeable = False
        mask = mask.copy()
        mask.flags.writeable = False
        object.__setattr__(self, "values", Y)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def q(self):
        return self.values.shape[1]

    @property
    def complete(self):
        return bool(self.mask.all())

    def rows(self, idx):
        return ResponseData(self.values[idx], self.family, self.mask[idx])
