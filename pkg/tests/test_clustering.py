import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedali.clustering import consolidate, kmeans_fit, weighted_prototype_average
from oracles import kmeans_reference


def test_average_single_client(rng):
    b = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(weighted_prototype_average([b], [7]), b)


def test_average_symmetric_pair(rng):
    v = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(weighted_prototype_average([v, -v], [5, 5]), np.zeros((4, 3)))


def test_average_weighted_scalar():
    assert weighted_prototype_average([np.array([[0.0]]), np.array([[4.0]])], [1, 3])[0, 0] == 3.0


def test_average_hand_three_clients(rng):
    banks = [rng.standard_normal((3, 2)) for _ in range(3)]
    n = [2, 5, 13]
    want = sum(n_i * b for n_i, b in zip(n, banks)) / sum(n)
    np.testing.assert_allclose(weighted_prototype_average(banks, n), want, atol=1e-12)


def test_average_errors():
    with pytest.raises(ValueError):
        weighted_prototype_average([np.zeros((2, 2)), np.zeros((3, 2))], [1, 1])
    with pytest.raises(ValueError):
        weighted_prototype_average([np.zeros((2, 2))], [0])
    with pytest.raises(ValueError):
        weighted_prototype_average([], [])


def test_fixed_point():
    pts = np.array([[0.0, 0], [1, 0], [0, 1]])
    res = kmeans_fit(pts, pts)
    assert res.iterations == 0 and res.inertia == 0.0
    np.testing.assert_array_equal(res.centroids, pts)


def test_two_blobs_recover_means(rng):
    a = rng.normal(0, 0.1, (30, 2)) + [5, 5]
    b = rng.normal(0, 0.1, (20, 2)) - [5, 5]
    res = kmeans_fit(np.concatenate([a, b]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    got = res.centroids[np.argsort(res.centroids[:, 0])]
    np.testing.assert_allclose(got, [b.mean(0), a.mean(0)], atol=1e-12)


def test_identical_points_reseed(caplog):
    pts = np.tile([[2.0, -1.0]], (6, 1))
    with caplog.at_level(logging.WARNING):
        res = kmeans_fit(pts, np.array([[0.0, 0.0], [9.0, 9.0]]))
    assert "fewer distinct points" in caplog.text
    np.testing.assert_allclose(res.centroids, [[2.0, -1.0], [2.0, -1.0]])
    assert res.inertia == 0.0


def test_matches_textbook_lloyd(rng):
    pts = rng.standard_normal((60, 3))
    init = pts[:5].copy() + 0.01
    res = kmeans_fit(pts, init, tol=0.0, max_iter=300)
    ref, lab = kmeans_reference(pts, init, iters=300)
    np.testing.assert_allclose(res.centroids, ref, atol=1e-12)
    np.testing.assert_array_equal(res.assignment, lab)


def test_matches_sklearn_with_fixed_init(rng):
    from sklearn.cluster import KMeans

    pts = np.concatenate([rng.normal(c, 0.3, (25, 2)) for c in ([0, 0], [4, 0], [0, 4])])
    init = np.array([[0.5, 0.5], [3.0, 0.5], [0.5, 3.0]])
    ours = kmeans_fit(pts, init, tol=0.0)
    sk = KMeans(3, init=init, n_init=1, algorithm="lloyd", tol=0.0, max_iter=300).fit(pts)
    np.testing.assert_allclose(ours.centroids, sk.cluster_centers_, atol=1e-10)
    assert ours.inertia == pytest.approx(sk.inertia_, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(1, 6), st.integers(0, 10_000))
def test_inertia_never_increases(n, k, seed):
    rng = np.random.default_rng(seed)
    k = min(k, n)
    pts = rng.standard_normal((n, 3))
    pts[: n // 3] = pts[0]  # duplicates provoke empty clusters
    res = kmeans_fit(pts, rng.standard_normal((k, 3)) * 3)
    hist = np.array(res.inertia_history)
    assert np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0]))
    assert res.centroids.shape == (k, 3)


def test_deterministic(rng):
    pts, init = rng.standard_normal((30, 4)), rng.standard_normal((4, 4))
    a, b = kmeans_fit(pts, init), kmeans_fit(pts, init)
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_too_few_points():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((1, 2)), np.zeros((2, 2)))


def test_consolidate_single_client_is_identity(rng):
    bank = rng.standard_normal((5, 4))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    res = consolidate([bank], [10])
    assert abs(res.inertia) < 1e-9
    np.testing.assert_allclose(res.centroids, bank, atol=1e-12)


def test_consolidate_identical_clients(rng):
    bank = rng.standard_normal((4, 3))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    res = consolidate([bank, bank.copy(), bank.copy()], [1, 2, 3])
    np.testing.assert_allclose(res.centroids, bank, atol=1e-12)
    np.testing.assert_allclose(weighted_prototype_average([bank] * 3, [1, 2, 3]), bank, atol=1e-15)


def test_consolidate_two_clear_clusters():
    # two clients, G=2, d=2; the points form clusters near (1,0) and (0,1)
    c1 = np.array([[1.0, 0.1], [0.1, 1.0]])
    c2 = np.array([[1.0, -0.1], [-0.1, 1.0]])
    res = consolidate([c1, c2], [1, 1], normalize=False)
    got = res.centroids[np.argsort(-res.centroids[:, 0])]
    np.testing.assert_allclose(got, [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)


def test_consolidate_normalize_toggle(rng):
    banks = [rng.standard_normal((3, 4)) for _ in range(2)]
    on = consolidate(banks, [1, 1]).centroids
    off = consolidate(banks, [1, 1], normalize=False).centroids
    np.testing.assert_allclose(np.linalg.norm(on, axis=1), 1.0)
    np.testing.assert_allclose(on, off / np.linalg.norm(off, axis=1, keepdims=True))
