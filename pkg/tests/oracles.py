"""Independent reference computations used by the tests."""

from itertools import product

import numpy as np
from scipy.optimize import linprog


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def balanced_vertices(n, m):
    """All 0/1 assignment matrices with one column per row and n/m rows per column.

    With uniform marginals and m | n these (scaled by 1/n) are exactly the
    vertices of the transport polytope.
    """
    per = n // m
    out = []
    for cols in product(range(m), repeat=n):
        if all(cols.count(j) == per for j in range(m)):
            v = np.zeros((n, m))
            v[np.arange(n), cols] = 1.0
            out.append(v)
    return out


def lp_plan_by_vertices(sim):
    """Exact balanced OT maximising total similarity; returns (plan, gap).

    ``gap`` is the difference in summed similarity between the best and the
    second-best vertex.
    """
    n, m = sim.shape
    verts = balanced_vertices(n, m)
    scores = np.array([(v * sim).sum() for v in verts])
    order = np.argsort(-scores)
    return verts[order[0]] / n, float(scores[order[0]] - scores[order[1]])


def lp_plan_scipy(sim):
    n, m = sim.shape
    A_eq, b_eq = [], []
    for i in range(n):
        row = np.zeros((n, m))
        row[i] = 1
        A_eq.append(row.ravel())
        b_eq.append(1 / n)
    for j in range(m):
        col = np.zeros((n, m))
        col[:, j] = 1
        A_eq.append(col.ravel())
        b_eq.append(1 / m)
    res = linprog(-sim.ravel(), A_eq=np.array(A_eq), b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.status == 0
    return res.x.reshape(n, m)


def separated_instances(n, m, d, count, min_gap=0.2, seed=0):
    """Random unit-vector instances whose LP optimum is unique by ``min_gap``.

    Near-ties between vertices make any entropic plan sit between them,
    which says nothing about solver correctness, so those draws are skipped.
    """
    rng = np.random.default_rng(seed)
    found = []
    while len(found) < count:
        x = unit_rows(rng.standard_normal((n, d)))
        p = unit_rows(rng.standard_normal((m, d)))
        plan, gap = lp_plan_by_vertices(x @ p.T)
        if gap >= min_gap:
            found.append((x, p, plan))
    return found


def tv(a, b):
    return 0.5 * float(np.abs(a - b).sum())


def marginal_residual(plan):
    n, m = plan.shape
    """Largest absolute deviation of a row or column sum from its uniform target."""
    return max(np.abs(plan.sum(1) - 1 / n).max(), np.abs(plan.sum(0) - 1 / m).max())


def kmeans_reference(points, init, iters=100):
    """Textbook Lloyd iterations with explicit loops (no empty-cluster handling)."""
    c = init.copy()
    for _ in range(iters):
        lab = np.array([int(np.argmin([np.sum((x - ci) ** 2) for ci in c])) for x in points])
        new = np.array([points[lab == j].mean(0) if np.any(lab == j) else c[j] for j in range(len(c))])
        if np.allclose(new, c, atol=0, rtol=0):
            break
        c = new
    return c, lab


def macro_f1_reference(pred, true):
    from sklearn.metrics import f1_score

    labels = np.union1d(np.unique(true), np.unique(pred))
    return 100.0 * f1_score(true, pred, labels=labels, average="macro", zero_division=0)
