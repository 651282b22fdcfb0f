import io
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from curatree.curation_sampler import sample_subset, uniform_random_subset
from curatree.diagnostics import (
    adjusted_rand_index,
    cluster_size_histogram,
    generate_heavy_tailed,
    quota_tv,
    realized_tv,
    tv_curve,
    tv_distance,
    write_csv,
    zipf_sizes,
)
from curatree.errors import InvalidParams, InvalidProportions, LengthMismatch

from conftest import make_tree


def brute_ari(a, b):
    """Pair-by-pair oracle over all n choose 2 pairs."""
    n = len(a)
    both = same_a = same_b = 0
    for i, j in itertools.combinations(range(n), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        both += sa and sb
        same_a += sa
        same_b += sb
    total = n * (n - 1) / 2
    expected = same_a * same_b / total
    maximum = (same_a + same_b) / 2
    if maximum == expected:
        return None
    return (both - expected) / (maximum - expected)


def test_tv_uniform_is_zero():
    assert tv_distance([0.25] * 4) == 0.0


def test_tv_worked_example():
    assert tv_distance([0.5, 0.3, 0.2]) == pytest.approx(1 / 6, abs=1e-12)


@pytest.mark.parametrize("k", [2, 3, 10, 62])
def test_tv_point_mass(k):
    p = np.zeros(k)
    p[0] = 1.0
    assert tv_distance(p) == pytest.approx((k - 1) / k, abs=1e-12)


@pytest.mark.parametrize("p", [[0.5, 0.4], [1.2, -0.2], [], [np.nan, 1.0]])
def test_tv_invalid(p):
    with pytest.raises(InvalidProportions):
        tv_distance(p)


def test_ari_identity_and_relabeling(rng):
    a = rng.integers(0, 5, 200)
    assert adjusted_rand_index(a, a) == 1.0
    assert adjusted_rand_index(a, (a + 3) % 5) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=2, max_size=25))
def test_ari_matches_pair_oracle(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    want = brute_ari(a, b)
    got = adjusted_rand_index(a, b)
    assert got == adjusted_rand_index(b, a)
    if want is None:
        assert got in (0.0, 1.0)
    else:
        assert got == pytest.approx(want, abs=1e-12)


def test_ari_agrees_with_sklearn(rng):
    for _ in range(20):
        n = int(rng.integers(2, 3000))
        a = rng.integers(0, int(rng.integers(1, 30)), n)
        b = np.where(rng.random(n) < 0.7, a, rng.integers(0, 30, n))
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_ari_independent_labelings_near_zero(rng):
    a = rng.integers(0, 10, 100_000)
    b = rng.integers(0, 10, 100_000)
    assert abs(adjusted_rand_index(a, b)) < 0.01


def test_ari_degenerate_cases():
    assert adjusted_rand_index([0, 0, 0], [1, 1, 1]) == 1.0
    assert adjusted_rand_index([0, 1, 2], [5, 6, 7]) == 1.0
    assert adjusted_rand_index([0, 0, 0], [0, 1, 2]) == 0.0
    with pytest.raises(LengthMismatch):
        adjusted_rand_index([0, 1], [0, 1, 2])
    with pytest.raises(LengthMismatch):
        adjusted_rand_index([0], [0])


def test_ari_large_counts_no_overflow():
    # 3e6 items in two giant cells; pair counts exceed 2**32
    n = 3_000_000
    a = np.repeat([0, 1], n // 2)
    b = a.copy()
    b[:10] = 1
    got = adjusted_rand_index(a, b)
    assert 0.99 < got < 1.0
    assert got == pytest.approx(adjusted_rand_score(a, b), abs=1e-9)


def test_histogram(small_heavy_tree):
    for lvl in (1, 2, 3):
        hist = cluster_size_histogram(small_heavy_tree, lvl)
        assert sum(s for _, s, _ in hist) == small_heavy_tree.count
        for c, s, lg in hist:
            assert abs(lg - math.log10(s)) <= 1e-12
            assert s == small_heavy_tree.level_sizes(lvl)[c]


def test_zipf_flat_tail():
    sizes = zipf_sizes(1003, 10, 0.0)
    assert sizes.sum() == 1003
    assert sizes.max() - sizes.min() <= 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 5000), st.integers(1, 60), st.floats(0, 3))
def test_zipf_sizes_sum_and_order(n, k, alpha):
    k = min(k, n)
    sizes = zipf_sizes(n, k, alpha)
    assert sizes.sum() == n and sizes.min() >= 1
    assert (np.diff(sizes) <= 1).all()


def test_generator_heavy_tail_concentration():
    _, labels = generate_heavy_tailed(20_000, 4, 20, 1.2, seed=0)
    counts = np.sort(np.bincount(labels))[::-1]
    assert counts.sum() == 20_000
    assert counts[:2].sum() / 20_000 >= 0.5


def test_generator_deterministic_and_validated():
    a, la = generate_heavy_tailed(500, 3, 5, 1.0, seed=4)
    b, lb = generate_heavy_tailed(500, 3, 5, 1.0, seed=4)
    assert np.array_equal(a.data, b.data) and np.array_equal(la, lb)
    with pytest.raises(InvalidParams):
        generate_heavy_tailed(3, 2, 5, 1.0)
    with pytest.raises(InvalidParams):
        generate_heavy_tailed(30, 2, 5, -1.0)


def test_write_csv_format():
    buf = io.StringIO()
    write_csv(buf, ["a", "b"], [(1, 0.1 + 0.2), (2, 1 / 3)])
    assert buf.getvalue() == "a,b\n1,0.3\n2,0.333333333333\n"


def test_curve_full_fraction_equals_imbalance(small_heavy_tree):
    tree = small_heavy_tree
    curve = tv_curve(tree, 3, 3, [0.05, 0.2, 1.0])
    full = tree.level_sizes(3)
    want = tv_distance(full / full.sum())
    assert curve.tvs[-1] == pytest.approx(want, abs=1e-12)
    assert curve.achieved[-1] == tree.count


def test_curve_balance_limit():
    # top clusters of 40, 20, 10 rows; sampling 3 * 10 rows gives exact balance
    tree = make_tree([0] * 40 + [1] * 20 + [2] * 10, [[0, 1, 2]])
    sub = sample_subset(tree, 2, size=30, seed=0)
    assert realized_tv(tree, sub, 2) == 0.0
    assert quota_tv(30, [40, 20, 10]) == 0.0


def test_curated_beats_random(small_heavy_tree):
    tree = small_heavy_tree
    curated = tv_curve(tree, 3, 3, [0.1])
    random = tv_curve(tree, 3, 3, [0.1], sampler=lambda t, lvl, fraction, seed, exact: uniform_random_subset(
        t, round(fraction * t.count), seed))
    assert curated.tvs[0] < random.tvs[0]


def test_curve_validates_fractions(small_heavy_tree):
    with pytest.raises(InvalidParams):
        tv_curve(small_heavy_tree, 3, 3, [0.5, 0.2])
    with pytest.raises(InvalidParams):
        tv_curve(small_heavy_tree, 3, 3, [0.0, 0.2])
