"""Balance and agreement diagnostics, CSV export, and a synthetic data generator."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .curation_sampler import CuratedSubset, allocate, sample_subset
from .embedding_store import EmbeddingMatrix
from .errors import InvalidParams, InvalidProportions, LengthMismatch
from .hierarchy import ClusterTree

PROPORTION_TOL = 1e-9


def _check_proportions(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise InvalidProportions("proportions must be a non-empty 1-d array")
    if not np.isfinite(p).all() or (p < 0).any():
        raise InvalidProportions("proportions must be finite and non-negative")
    if abs(math.fsum(p) - 1.0) > PROPORTION_TOL:
        raise InvalidProportions(f"proportions sum to {math.fsum(p)!r}, not 1")
    return p


def proportions(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise InvalidProportions("counts sum to zero")
    return counts / total


def tv_distance(p) -> float:
    """Total variation distance between ``p`` and the uniform distribution on len(p) points."""
    p = _check_proportions(p)
    return 0.5 * math.fsum(np.abs(p - 1.0 / len(p)))


def tv_of_counts(counts) -> float:
    return tv_distance(proportions(counts))


def level_counts_of(tree: ClusterTree, subset: CuratedSubset, level: int) -> np.ndarray:
    """How many subset rows fall in each cluster at ``level`` (zeros included)."""
    labels = tree.ancestor_map(1, level)[subset.bottom_clusters]
    return np.bincount(labels, minlength=len(tree.level_sizes(level)))


def realized_tv(tree: ClusterTree, subset: CuratedSubset, level: int) -> float:
    return tv_of_counts(level_counts_of(tree, subset, level))


def quota_tv(N: int, sizes) -> float:
    """TV of the quota proportions allocate(N, sizes) produces (0 for N = 0)."""
    plan = allocate(N, sizes)
    if plan.achieved == 0:
        return 0.0
    return tv_of_counts(plan.quotas)


@dataclass
class TvCurve:
    sampling_level: int
    measure_level: int
    points: list[tuple[float, float]] = field(default_factory=list)
    achieved: list[int] = field(default_factory=list)

    @property
    def fractions(self) -> list[float]:
        return [f for f, _ in self.points]

    @property
    def tvs(self) -> list[float]:
        return [t for _, t in self.points]


def tv_curve(
    tree: ClusterTree,
    sampling_level: int,
    measure_level: int,
    fractions,
    seed: int = 0,
    sampler=sample_subset,
    exact: bool = False,
) -> TvCurve:
    """TV at ``measure_level`` of subsets sampled at ``sampling_level`` for each fraction.

    ``sampler`` is called as ``sampler(tree, level, fraction=f, seed=seed, exact=exact)``.
    """
    tree.check_level(measure_level)
    fractions = [float(f) for f in fractions]
    if any(not 0 < f <= 1 for f in fractions):
        raise InvalidParams("fractions must lie in (0, 1]")
    if any(a >= b for a, b in zip(fractions, fractions[1:])):
        raise InvalidParams("fractions must be strictly increasing")
    curve = TvCurve(sampling_level, measure_level)
    for f in fractions:
        subset = sampler(tree, sampling_level, fraction=f, seed=seed, exact=exact)
        curve.points.append((f, realized_tv(tree, subset, measure_level)))
        curve.achieved.append(subset.achieved)
    return curve


# -- adjusted Rand index ----------------------------------------------------

def _pairs(counts: np.ndarray) -> int:
    # n*(n-1)/2 per cell stays below 2**63 for n up to 4e9; summed as Python ints
    counts = counts.astype(np.int64)
    return sum(int(v) for v in (counts * (counts - 1) // 2))


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Adjusted Rand index of two labelings of the same items.

    Pair counts are exact integers and the final ratio is formed as a
    fraction, so the result is exact up to one final rounding.  When both
    partitions are trivial (expected index equals its maximum) the score is
    1.0 for identical partitions and 0.0 otherwise.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if len(a) != len(b):
        raise LengthMismatch(f"labelings have lengths {len(a)} and {len(b)}")
    n = len(a)
    if n < 2:
        raise LengthMismatch("need at least 2 items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    ia = ia.ravel().astype(np.int64)
    ib = ib.ravel().astype(np.int64)
    nb = int(ib.max()) + 1
    _, cells = np.unique(ia * nb + ib, return_counts=True)
    row = np.bincount(ia)
    col = np.bincount(ib)

    index = _pairs(cells)
    sum_a = _pairs(row)
    sum_b = _pairs(col)
    total = n * (n - 1) // 2
    expected = Fraction(sum_a * sum_b, total)
    maximum = Fraction(sum_a + sum_b, 2)
    if maximum == expected:
        same = len(cells) == len(row) == len(col)
        return 1.0 if same else 0.0
    return float((index - expected) / (maximum - expected))


# -- cluster sizes ----------------------------------------------------------

def cluster_size_histogram(tree: ClusterTree, level: int) -> list[tuple[int, int, float]]:
    sizes = tree.level_sizes(level)
    return [(c, int(s), math.log10(int(s))) for c, s in enumerate(sizes)]


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".12g")
    return str(value)


def write_csv(fh, header, rows) -> None:
    """Comma-separated, header first, floats with 12 significant digits."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])


# -- synthetic heavy-tailed mixture ----------------------------------------

def zipf_sizes(num_points: int, num_components: int, tail_exponent: float) -> np.ndarray:
    """Component sizes proportional to rank**-tail_exponent, each >= 1, summing to num_points."""
    ranks = np.arange(1, num_components + 1, dtype=np.float64)
    weights = ranks ** -float(tail_exponent)
    weights /= weights.sum()
    spare = num_points - num_components
    ideal = weights * spare
    sizes = np.floor(ideal).astype(np.int64)
    short = spare - int(sizes.sum())
    # largest remainder, ties to the lower rank
    order = np.lexsort((ranks, -(ideal - sizes)))
    sizes[order[:short]] += 1
    return sizes + 1


def generate_heavy_tailed(
    num_points: int,
    dim: int,
    num_components: int,
    tail_exponent: float,
    seed: int = 0,
    mean_scale: float = 4.0,
    component_scale: float = 1.0,
) -> tuple[EmbeddingMatrix, np.ndarray]:
    """Gaussian mixture with Zipf-distributed component sizes.

    Component means are ``mean_scale * N(0, I)``; every component is
    isotropic with standard deviation ``component_scale``.  Rows are
    shuffled; the returned labels give each row's generating component
    (component 0 is the largest).
    """
    if num_points < 1 or dim < 1 or num_components < 1:
        raise InvalidParams("num_points, dim and num_components must be positive")
    if num_components > num_points:
        raise InvalidParams(f"{num_components} components cannot fit in {num_points} points")
    if not tail_exponent >= 0 or not math.isfinite(tail_exponent):
        raise InvalidParams(f"tail_exponent must be finite and >= 0, got {tail_exponent}")
    if not mean_scale > 0 or not component_scale > 0:
        raise InvalidParams("scales must be positive")
    rng = np.random.default_rng(seed)
    sizes = zipf_sizes(num_points, num_components, tail_exponent)
    means = rng.standard_normal((num_components, dim)) * mean_scale
    labels = np.repeat(np.arange(num_components), sizes)
    rng.shuffle(labels)
    data = means[labels] + rng.standard_normal((num_points, dim)) * component_scale
    return EmbeddingMatrix.from_array(data.astype(np.float32)), labels
