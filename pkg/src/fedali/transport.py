"""Entropic optimal transport between token embeddings and prototypes.

All routines are pure numpy and non-differentiable: the plan only decides
*which* prototype each embedding is paired with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DENOM_FLOOR = 1e-9


@dataclass(frozen=True)
class TransportPlan:
    matrix: np.ndarray  # [N_e, M]
    epsilon: float | None
    iterations: int

    @property
    def shape(self):
        return self.matrix.shape

    def columns(self, start: int, stop: int) -> "TransportPlan":
        """Sub-plan restricted to prototype columns ``start:stop``."""
        return TransportPlan(self.matrix[:, start:stop], self.epsilon, self.iterations)


def similarity_init(x_norm, p_norm, epsilon: float, row_shift: bool = False) -> np.ndarray:
    """``exp(x_norm @ p_norm.T / epsilon)`` for row-normalised inputs.

    ``row_shift`` subtracts each row's maximum exponent first, which avoids
    overflow at small ``epsilon`` and is invisible to Sinkhorn (a row scale).
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    x_norm = np.asarray(x_norm, dtype=np.float64)
    p_norm = np.asarray(p_norm, dtype=np.float64)
    if x_norm.shape[1] != p_norm.shape[1]:
        raise ValueError(f"width mismatch: embeddings {x_norm.shape}, prototypes {p_norm.shape}")
    logits = x_norm @ p_norm.T / epsilon
    if row_shift:
        logits -= logits.max(axis=1, keepdims=True)
    return np.exp(logits)


def sinkhorn(o0, iterations: int = 3, epsilon: float | None = None) -> TransportPlan:
    """Alternate row and column rescaling of ``o0`` toward uniform marginals.

    Rows target ``1/N_e`` and columns ``1/M``; each iteration ends with the
    column step so column marginals are exact on return.
    """
    o = np.array(o0, dtype=np.float64)
    if o.ndim != 2 or o.size == 0:
        raise ValueError(f"sinkhorn expects a non-empty 2-D matrix, got shape {o.shape}")
    if not np.all(np.isfinite(o)) or np.any(o < 0) or not np.all(o.max(axis=1) > 0):
        raise ValueError("sinkhorn requires finite, non-negative entries with a positive entry per row")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    n, m = o.shape
    # per-row rescaling is absorbed by the first row step; keeps row sums >= 1
    o /= o.max(axis=1, keepdims=True)
    for _ in range(iterations):
        o *= (1.0 / n) / np.maximum(o.sum(axis=1, keepdims=True), DENOM_FLOOR)
        o *= (1.0 / m) / np.maximum(o.sum(axis=0, keepdims=True), DENOM_FLOOR)
    return TransportPlan(o, epsilon, iterations)


def transport_plan(x, prototypes, epsilon: float, iterations: int) -> TransportPlan:
    """Row-normalise both sides, build the kernel, and run Sinkhorn."""
    xn = _rownorm(x)
    pn = _rownorm(prototypes)
    return sinkhorn(similarity_init(xn, pn, epsilon, row_shift=True), iterations, epsilon)


def direct_scores(x, prototypes, metric: str, epsilon: float) -> TransportPlan:
    """Point-to-point kernel without marginal balancing.

    ``cosine`` uses ``exp(cos / eps)``; ``euclidean`` uses
    ``exp(-||x - p|| / eps)`` between unit vectors. The row argmax matches the
    argmax of the raw similarity in both cases.
    """
    xn = _rownorm(x)
    pn = _rownorm(prototypes)
    if metric == "cosine":
        logits = xn @ pn.T
    elif metric == "euclidean":
        sq = (xn * xn).sum(1)[:, None] + (pn * pn).sum(1)[None, :] - 2.0 * xn @ pn.T
        logits = -np.sqrt(np.maximum(sq, 0.0))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    logits = logits / epsilon
    logits -= logits.max(axis=1, keepdims=True)
    return TransportPlan(np.exp(logits), epsilon, 0)


def hard_assign(plan) -> np.ndarray:
    """Column index of the largest entry per row; ties go to the lowest index."""
    matrix = plan.matrix if isinstance(plan, TransportPlan) else np.asarray(plan)
    return np.argmax(matrix, axis=1)


def topk_targets(plan_t, x, k: int) -> np.ndarray:
    """Per-prototype weighted mean of its ``k`` best-scoring embeddings.

    ``plan_t`` is prototype-major ``[G, N_e]``. Selected scores are
    renormalised to sum to one. With ``k == 1`` the best embedding is
    returned as is.
    """
    plan_t = np.asarray(plan_t)
    x = np.asarray(x)
    n_e = plan_t.shape[1]
    if x.shape[0] != n_e:
        raise ValueError(f"plan has {n_e} embeddings, x has {x.shape[0]}")
    if not 1 <= k <= n_e:
        raise ValueError(f"k must lie in [1, {n_e}], got {k}")
    if k < n_e:
        # candidates via partition, then an exact (score desc, index asc) order
        cand = np.sort(np.argpartition(-plan_t, k - 1, axis=1)[:, :k], axis=1)
        # widen to every entry tied with the k-th best so tie-breaking stays index-first
        kth = np.take_along_axis(plan_t, cand, axis=1).min(axis=1, keepdims=True)
        if np.any((plan_t == kth).sum(axis=1) > 1):
            order = np.argsort(-plan_t, axis=1, kind="stable")[:, :k]
        else:
            vals = np.take_along_axis(plan_t, cand, axis=1)
            order = np.take_along_axis(cand, np.argsort(-vals, axis=1, kind="stable"), axis=1)
    else:
        order = np.argsort(-plan_t, axis=1, kind="stable")
    if k == 1:
        return x[order[:, 0]].copy()
    scores = np.take_along_axis(plan_t, order, axis=1)
    totals = scores.sum(axis=1, keepdims=True)
    weights = np.where(totals > 0, scores / np.where(totals > 0, totals, 1.0), 1.0 / k)
    return np.einsum("gk,gkd->gd", weights, x[order])


def coverage_k(n_embeddings: int, n_prototypes: int) -> int:
    """Targets per prototype so that every embedding can be covered."""
    return min(-(-n_embeddings // n_prototypes), n_embeddings)


def _rownorm(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    norm = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norm < 1e-12, 1.0, norm)
