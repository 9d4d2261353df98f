"""Server-side consolidation of client prototype banks into global prototypes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    iterations: int
    inertia_history: list[float] = field(default_factory=list)


def weighted_prototype_average(banks: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Row-wise convex combination of client banks with weights ``n_c / n``."""
    if len(banks) == 0:
        raise ValueError("no banks to average")
    if len(banks) != len(weights):
        raise ValueError(f"{len(banks)} banks but {len(weights)} weights")
    shape = np.shape(banks[0])
    for i, b in enumerate(banks):
        if np.shape(b) != shape:
            raise ValueError(f"bank {i} has shape {np.shape(b)}, expected {shape}")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    w = w / w.sum()
    out = np.zeros(shape, dtype=np.float64)
    for wi, b in zip(w, banks):
        out += wi * np.asarray(b, dtype=np.float64)
    return out


def _assign(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # direct differences (chunked) keep inertia free of cancellation noise
    idx = np.empty(len(points), dtype=np.int64)
    best = np.empty(len(points))
    chunk = max(1, 2_000_000 // max(1, centroids.size))
    for s in range(0, len(points), chunk):
        diff = points[s:s + chunk, None, :] - centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        idx[s:s + chunk] = np.argmin(d2, axis=1)
        best[s:s + chunk] = d2[np.arange(len(d2)), idx[s:s + chunk]]
    return idx, best


def kmeans_fit(points, init, max_iter: int = 100, tol: float = 1e-6) -> KmeansResult:
    """Lloyd's algorithm from a fixed initialisation (no restarts).

    ``k`` is the number of ``init`` rows. Stops when no centroid moves by
    more than ``tol`` or after ``max_iter`` updates. A cluster left empty is
    reseeded at the point farthest from its current centroid. ``iterations``
    counts the updates that moved some centroid by more than ``tol``.
    """
    points = np.asarray(points, dtype=np.float64)
    centroids = np.array(init, dtype=np.float64)
    if points.ndim != 2 or centroids.ndim != 2 or points.shape[1] != centroids.shape[1]:
        raise ValueError(f"incompatible shapes: points {points.shape}, init {centroids.shape}")
    k = centroids.shape[0]
    if points.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {points.shape[0]}")
    if len(np.unique(points, axis=0)) < k:
        log.warning("fewer distinct points than clusters (%d); duplicate centroids will appear", k)

    assignment, dist = _assign(points, centroids)
    history = [float(dist.sum())]
    moved_steps = 0
    for _ in range(max_iter):
        new = centroids.copy()
        counts = np.bincount(assignment, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, points)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            far = int(np.argmax(dist))
            new[j] = points[far]
            assignment[far] = j
            dist[far] = 0.0
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        assignment, dist = _assign(points, centroids)
        history.append(float(dist.sum()))
        if shift <= tol:
            break
        moved_steps += 1
    return KmeansResult(centroids, assignment, history[-1], moved_steps, history)


def consolidate(banks: Sequence[np.ndarray], weights: Sequence[float], *, normalize: bool = True,
                max_iter: int = 100, tol: float = 1e-6) -> KmeansResult:
    """Cluster all client prototypes into ``G`` centroids, seeded by their weighted average.

    With ``normalize`` the centroids are projected back onto the unit sphere.
    """
    init = weighted_prototype_average(banks, weights)
    result = kmeans_fit(np.concatenate([np.asarray(b, dtype=np.float64) for b in banks]), init,
                        max_iter=max_iter, tol=tol)
    if normalize:
        norm = np.linalg.norm(result.centroids, axis=1, keepdims=True)
        result.centroids = result.centroids / np.where(norm < 1e-12, 1.0, norm)
    return result
