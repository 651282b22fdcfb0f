import numpy as np
import pytest

from curatree.errors import DimensionMismatch, InvalidConfig, TooFewRows
from curatree.kmeans_core import (
    KMeansConfig,
    _repair_empty,
    assign_to_centroids,
    inertia_of,
    kmeans_fit,
    worker_count,
)


def brute_force_nearest(rows, centroids):
    out = []
    for r in np.asarray(rows, dtype=np.float64):
        best, best_d = 0, None
        for j, c in enumerate(np.asarray(centroids, dtype=np.float64)):
            d = sum((a - b) ** 2 for a, b in zip(r, c))
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def label_agreement(pred, truth):
    """Best agreement over label permutations (two labels)."""
    same = (pred == truth).mean()
    return max(same, 1 - same)


def test_single_cluster_mean():
    res = kmeans_fit(np.array([[0, 0], [2, 0], [4, 0]], dtype=np.float32), KMeansConfig(k=1))
    np.testing.assert_array_equal(res.centroids, [[2.0, 0.0]])
    assert res.inertia == 8.0
    assert res.converged


def test_one_row_per_cluster(rng):
    x = rng.standard_normal((12, 3)).astype(np.float32)
    res = kmeans_fit(x, KMeansConfig(k=12, seed=4))
    assert res.inertia == 0.0
    assert sorted(res.assignment) == list(range(12))
    for i, c in enumerate(res.assignment):
        np.testing.assert_array_equal(res.centroids[c], x[i].astype(np.float64))


def test_two_blobs_recovered():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, (200, 2))
    b = rng.normal(0, 1, (200, 2)) + [10, 0]
    x = np.concatenate([a, b]).astype(np.float32)
    truth = np.repeat([0, 1], 200)
    res = kmeans_fit(x, KMeansConfig(k=2, seed=9))
    assert label_agreement(res.assignment, truth) >= 0.99


def test_too_few_rows():
    with pytest.raises(TooFewRows):
        kmeans_fit(np.zeros((3, 2), dtype=np.float32), KMeansConfig(k=4))


@pytest.mark.parametrize("kwargs", [dict(k=0), dict(k=2, tol=-1.0), dict(k=2, seeding="magic"), dict(k=2, max_iters=0)])
def test_bad_config(kwargs):
    with pytest.raises(InvalidConfig):
        KMeansConfig(**kwargs)


def test_assign_exact_match_and_tie_break():
    centroids = np.array([[5, 5], [1, 0], [9, 9], [3, 3], [-1, 0]], dtype=np.float32)
    assert assign_to_centroids(np.array([[3, 3]], dtype=np.float32), centroids)[0] == 3
    # (0, 0) is equidistant from centroids 1 and 4
    assert assign_to_centroids(np.array([[0, 0]], dtype=np.float32), centroids)[0] == 1


def test_assign_matches_brute_force(rng):
    rows = rng.standard_normal((1000, 4)).astype(np.float32)
    centroids = rng.standard_normal((17, 4)).astype(np.float32)
    np.testing.assert_array_equal(assign_to_centroids(rows, centroids), brute_force_nearest(rows, centroids))


def test_assign_integer_grid_ties_match_brute_force(rng):
    # small integer coordinates produce many exact ties
    rows = rng.integers(-3, 4, (500, 2)).astype(np.float32)
    centroids = rng.integers(-3, 4, (9, 2)).astype(np.float32)
    np.testing.assert_array_equal(assign_to_centroids(rows, centroids), brute_force_nearest(rows, centroids))


def test_assign_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        assign_to_centroids(np.zeros((2, 3), np.float32), np.zeros((2, 2), np.float32))


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 300))
    k = int(rng.integers(1, min(n, 20) + 1))
    d = int(rng.integers(1, 6))
    x = rng.standard_normal((n, d)).astype(np.float32)
    if seed % 3 == 0:
        x = np.round(x)  # duplicate rows force empty clusters
    seeding = ("plus_plus", "random_rows")[seed % 2]
    return x, KMeansConfig(k=k, seed=seed, tol=0.0, max_iters=100, seeding=seeding)


@pytest.mark.parametrize("seed", range(40))
def test_invariants_on_random_instances(seed):
    x, cfg = _random_instance(seed)
    res = kmeans_fit(x, cfg)
    hist = np.array(res.inertia_history)
    assert (np.diff(hist) <= 0).all()
    assert np.bincount(res.assignment, minlength=cfg.k).min() >= 1
    recomputed = inertia_of(x, res.centroids, res.assignment)
    assert res.inertia == pytest.approx(recomputed, rel=1e-5, abs=1e-12)
    if res.converged:
        for c in range(cfg.k):
            mean = x[res.assignment == c].astype(np.float64).mean(axis=0)
            np.testing.assert_allclose(res.centroids[c], mean, rtol=0, atol=1e-5)


@pytest.mark.parametrize("seed", range(12))
def test_permutation_equivariance(seed):
    x, cfg = _random_instance(seed)
    res = kmeans_fit(x, cfg)
    perm = np.random.default_rng(seed + 100).permutation(len(x))
    other = kmeans_fit(x[perm], cfg)
    assert np.array_equal(other.centroids, res.centroids)
    assert other.inertia == res.inertia
    if len(np.unique(x, axis=0)) == len(x):
        assert np.array_equal(other.assignment, res.assignment[perm])


def test_deterministic(rng):
    x = rng.standard_normal((400, 5)).astype(np.float32)
    cfg = KMeansConfig(k=7, seed=11)
    a, b = kmeans_fit(x, cfg), kmeans_fit(x, cfg)
    assert np.array_equal(a.assignment, b.assignment)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_worker_count_does_not_change_result(monkeypatch, rng):
    x = rng.standard_normal((6000, 4)).astype(np.float32)
    cfg = KMeansConfig(k=600, seed=2, max_iters=5)
    monkeypatch.setenv("CURATREE_THREADS", "1")
    single = kmeans_fit(x, cfg)
    monkeypatch.setenv("CURATREE_THREADS", "4")
    assert worker_count() == 4
    multi = kmeans_fit(x, cfg)
    assert np.array_equal(single.assignment, multi.assignment)
    assert single.centroids.tobytes() == multi.centroids.tobytes()


def test_repair_moves_farthest_row_of_largest_cluster():
    x = np.array([[0.0], [1.0], [5.0], [10.0], [11.0]])
    labels = np.array([0, 0, 0, 2, 2])
    centroids = np.array([[2.0], [99.0], [10.5]])
    dist = (x[:, 0] - centroids[labels, 0]) ** 2
    before = dist.sum()
    assert _repair_empty(x, labels, dist, centroids, 3) == 1
    assert labels.tolist() == [0, 0, 1, 2, 2]
    assert centroids[1, 0] == 5.0
    assert dist.sum() <= before


def test_all_identical_rows():
    x = np.ones((10, 3), dtype=np.float32)
    res = kmeans_fit(x, KMeansConfig(k=4, seed=0))
    assert np.bincount(res.assignment, minlength=4).min() >= 1
    assert res.inertia == 0.0
