"""Exact Lloyd k-means with k-means++ or random-row seeding.

All arithmetic runs in float64.  Rows are processed in a canonical
(lexicographic) order so results do not depend on the order rows were
supplied in: permuting the input permutes ``assignment`` identically and
leaves centroids bitwise unchanged.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embedding_store import EmbeddingMatrix
from .errors import DimensionMismatch, InvalidConfig, TooFewRows, ValidationError

log = logging.getLogger(__name__)

SEEDINGS = ("plus_plus", "random_rows")
DEFAULT_MAX_ITERS = 50
DEFAULT_REL_TOL = 1e-4

# distance-matrix entries per shard
_SHARD_ENTRIES = 1 << 21
# relative slack under which two candidate distances count as a near-tie
_TIE_SLACK = 1e-9


def worker_count() -> int:
    """Worker cap from ``CURATREE_THREADS`` (0 or unset = all cores)."""
    raw = os.environ.get("CURATREE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise InvalidConfig(f"CURATREE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise InvalidConfig("CURATREE_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


@dataclass(frozen=True)
class KMeansConfig:
    k: int
    max_iters: int = DEFAULT_MAX_ITERS
    # absolute threshold on mean centroid displacement; None = 1e-4 * mean row norm
    tol: float | None = None
    seed: int = 0
    seeding: str = "plus_plus"

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise InvalidConfig(f"k must be a positive integer, got {self.k!r}")
        if self.max_iters < 1:
            raise InvalidConfig(f"max_iters must be positive, got {self.max_iters}")
        if self.tol is not None and not self.tol >= 0:
            raise InvalidConfig(f"tol must be non-negative, got {self.tol}")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfig("seed must fit in an unsigned 64-bit integer")
        if self.seeding not in SEEDINGS:
            raise InvalidConfig(f"seeding must be one of {SEEDINGS}, got {self.seeding!r}")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    iterations_run: int
    converged: bool
    # inertia after each Lloyd iteration (assignment + update)
    inertia_history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


def _as_rows(data) -> np.ndarray:
    arr = data.data if isinstance(data, EmbeddingMatrix) else np.asarray(data)
    if arr.ndim != 2:
        raise ValidationError(f"expected a 2-d array of rows, got shape {arr.shape}")
    return arr


def _shards(n: int, k: int) -> list[tuple[int, int]]:
    step = max(1, _SHARD_ENTRIES // max(k, 1))
    return [(s, min(s + step, n)) for s in range(0, n, step)]


def _nearest_block(
    rows: np.ndarray, centroids_m2: np.ndarray, c_sq: np.ndarray, exact_ties: bool
) -> np.ndarray:
    x = rows.astype(np.float64, copy=False)
    # ||x||^2 is constant per row and irrelevant to the argmin
    d2 = x @ centroids_m2.T
    d2 += c_sq
    best = np.argmin(d2, axis=1)
    if not exact_ties:
        return best
    # expanded distances lose precision; settle near-ties with direct differences
    x_sq = np.einsum("ij,ij->i", x, x)
    thresh = d2[np.arange(len(x)), best] + _TIE_SLACK * (x_sq + c_sq.max()) + 1e-300
    near = np.count_nonzero(d2 <= thresh[:, None], axis=1) > 1
    if near.any():
        centroids = centroids_m2 / -2.0
        for i in np.flatnonzero(near):
            exact = ((x[i] - centroids) ** 2).sum(axis=1)
            best[i] = int(np.argmin(exact))  # lowest index wins exact ties
    return best


def _nearest(
    rows: np.ndarray, centroids: np.ndarray, workers: int | None = None, exact_ties: bool = True
) -> np.ndarray:
    centroids = np.ascontiguousarray(centroids, dtype=np.float64)
    c_sq = np.einsum("ij,ij->i", centroids, centroids)
    centroids_m2 = -2.0 * centroids
    shards = _shards(len(rows), len(centroids))
    workers = worker_count() if workers is None else workers

    def run(se):
        return _nearest_block(rows[se[0]:se[1]], centroids_m2, c_sq, exact_ties)

    out = np.empty(len(rows), dtype=np.int64)
    if workers <= 1 or len(shards) <= 1:
        for s, e in shards:
            out[s:e] = run((s, e))
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for (s, e), part in zip(shards, pool.map(run, shards)):
            out[s:e] = part
    return out


def assign_to_centroids(rows, centroids) -> np.ndarray:
    """Index of the nearest centroid (squared Euclidean) for every row.

    Ties go to the lowest centroid index.
    """
    rows = _as_rows(rows)
    centroids = _as_rows(centroids)
    if rows.shape[1] != centroids.shape[1]:
        raise DimensionMismatch(
            f"rows have dim {rows.shape[1]}, centroids have dim {centroids.shape[1]}"
        )
    if len(centroids) == 0:
        raise ValidationError("no centroids to assign to")
    return _nearest(rows, centroids)


def _row_sq_dist(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    diff = x - centroids[labels]
    return np.einsum("ij,ij->i", diff, diff)


def _seed_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    x_sq = np.einsum("ij,ij->i", x, x)

    def sq_dist_to(i):
        d = x @ (-2.0 * x[i])
        d += x_sq
        d += x_sq[i]
        return np.maximum(d, 0.0, out=d)

    chosen = [int(rng.integers(n))]
    closest = sq_dist_to(chosen[0])
    for _ in range(1, k):
        cum = np.cumsum(closest)
        if cum[-1] <= 0.0:
            # every row coincides with a chosen centre; duplicates get repaired later
            idx = int(rng.integers(n))
        else:
            idx = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), n - 1)
        chosen.append(idx)
        np.minimum(closest, sq_dist_to(idx), out=closest)
    return x[chosen].copy()


def _seed_random_rows(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.sort(rng.choice(len(x), size=k, replace=False))
    return x[idx].copy()


def _repair_empty(
    x: np.ndarray, labels: np.ndarray, dist: np.ndarray, centroids: np.ndarray, k: int
) -> int:
    """Move the farthest row of the largest cluster into each empty cluster."""
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    for j in empty:
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        row = int(members[np.argmax(dist[members])])
        labels[row] = j
        dist[row] = 0.0
        centroids[j] = x[row]
        counts[big] -= 1
        counts[j] = 1
    return len(empty)


def _means(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=k)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    sums = np.add.reduceat(x[order], starts, axis=0)
    return sums / counts[:, None]


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Row permutation that sorts rows lexicographically (first column most significant)."""
    if x.shape[1] == 0:
        return np.arange(len(x))
    return np.lexsort(x.T[::-1])


def kmeans_fit(data, config: KMeansConfig) -> KMeansResult:
    rows = _as_rows(data)
    n, dim = rows.shape
    k = int(config.k)
    if k > n:
        raise TooFewRows(f"k={k} exceeds the number of rows ({n})")
    if dim == 0:
        raise ValidationError("rows have zero dimensions")
    x = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValidationError("rows contain non-finite values")
    order = canonical_order(x)
    x = x[order]

    tol = config.tol
    if tol is None:
        tol = DEFAULT_REL_TOL * float(np.sqrt(np.einsum("ij,ij->i", x, x)).mean())

    rng = np.random.default_rng(config.seed)
    if config.seeding == "plus_plus":
        centroids = _seed_plus_plus(x, k, rng)
    else:
        centroids = _seed_random_rows(x, k, rng)

    workers = worker_count()
    labels = None
    history: list[float] = []
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iters + 1):
        new_labels = _nearest(x, centroids, workers, exact_ties=False)
        dist = _row_sq_dist(x, centroids, new_labels)
        if labels is not None:
            # only move a row when its exact distance strictly improves
            old = _row_sq_dist(x, centroids, labels)
            stay = old <= dist
            new_labels[stay] = labels[stay]
            dist[stay] = old[stay]
        repaired = _repair_empty(x, new_labels, dist, centroids, k)
        if repaired:
            log.debug("iteration %d: reseeded %d empty clusters", iterations, repaired)
        unchanged = labels is not None and np.array_equal(new_labels, labels)
        labels = new_labels
        updated = _means(x, labels, k)
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).mean())
        centroids = updated
        history.append(float(_row_sq_dist(x, centroids, labels).sum()))
        if unchanged or shift < tol:
            converged = True
            break

    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = labels
    return KMeansResult(
        centroids=centroids,
        assignment=assignment,
        inertia=history[-1],
        iterations_run=iterations,
        converged=converged,
        inertia_history=history,
    )


def inertia_of(data, centroids, assignment) -> float:
    x = np.asarray(_as_rows(data), dtype=np.float64)
    return float(_row_sq_dist(x, np.asarray(centroids, dtype=np.float64), np.asarray(assignment)).sum())
