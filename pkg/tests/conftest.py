from __future__ import annotations

import numpy as np
import pytest

from curatree.diagnostics import generate_heavy_tailed
from curatree.hierarchy import ClusterTree, TreeConfig, build_tree, _aggregate_sizes
from curatree.kmeans_core import KMeansConfig


def make_tree(base_assignment, parents, dim: int | None = None, seed: int = 0) -> ClusterTree:
    """Tree with a hand-specified structure (no clustering involved)."""
    base = np.asarray(base_assignment, dtype=np.int64)
    parents = [np.asarray(p, dtype=np.int64) for p in parents]
    level_counts = [int(base.max()) + 1] + [int(p.max()) + 1 for p in parents]
    sizes = _aggregate_sizes(base, parents, level_counts)
    if dim is None:
        centroids = [None] * len(level_counts)
    else:
        rng = np.random.default_rng(seed)
        centroids = [rng.standard_normal((k, dim)).astype(np.float32) for k in level_counts]
    tree = ClusterTree(centroids=centroids, parents=parents, sizes=sizes, base_assignment=base)
    tree.validate()
    return tree


def tree_with_top_sizes(top_sizes, rows_per_leaf: int = 1, leaves_per_top=None) -> ClusterTree:
    """Two-level tree whose top clusters hold ``top_sizes`` rows.

    Each top cluster has ``leaves_per_top`` leaves (default: one leaf per
    ``rows_per_leaf`` rows); rows are contiguous per top cluster.
    """
    base, parent = [], []
    leaf = 0
    for top, size in enumerate(top_sizes):
        n_leaves = leaves_per_top or max(1, size // rows_per_leaf)
        n_leaves = min(n_leaves, size)
        for i in range(size):
            base.append(leaf + i % n_leaves)
        parent.extend([top] * n_leaves)
        leaf += n_leaves
    return make_tree(base, [parent])


def random_tree(rng: np.random.Generator, count: int, level_counts) -> ClusterTree:
    """Random valid tree: every cluster at every level gets at least one child/row."""
    level_counts = list(level_counts)
    base = np.concatenate([np.arange(level_counts[0]), rng.integers(0, level_counts[0], count - level_counts[0])])
    rng.shuffle(base)
    parents = []
    for below, above in zip(level_counts, level_counts[1:]):
        p = np.concatenate([np.arange(above), rng.integers(0, above, below - above)])
        rng.shuffle(p)
        parents.append(p)
    return make_tree(base, parents)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def pairs_data():
    """8 rows: 4 tight pairs, pairs {0,1} and {2,3} form two far-apart super-blobs."""
    centers = np.array([[0, 0], [0, 10], [100, 0], [100, 10]], dtype=np.float32)
    offsets = np.array([[0, 0], [0.5, 0]], dtype=np.float32)
    rows = np.concatenate([centers + o for o in offsets])
    truth_pair = np.concatenate([np.arange(4), np.arange(4)])
    truth_blob = truth_pair // 2
    return rows, truth_pair, truth_blob


@pytest.fixture(scope="session")
def pairs_tree(pairs_data):
    rows, _, _ = pairs_data
    return build_tree(rows, TreeConfig((4, 2), KMeansConfig(k=1, seed=3)))


@pytest.fixture(scope="session")
def small_heavy():
    matrix, labels = generate_heavy_tailed(6000, 8, 10, 1.2, seed=7)
    return matrix, labels


@pytest.fixture(scope="session")
def small_heavy_tree(small_heavy):
    matrix, _ = small_heavy
    return build_tree(matrix, TreeConfig((120, 24, 6), KMeansConfig(k=1, seed=1)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
