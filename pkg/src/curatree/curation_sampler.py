"""Top-down balanced sampling from a cluster tree.

At a node with children of sizes ``s_i`` and a budget ``N``, every child gets
``min(n, s_i)`` samples where ``n`` minimizes ``|N - sum_i min(n, s_i)|``.
Each child's quota is then split over its own children the same way, down to
level 1, where rows are drawn uniformly without replacement.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import (
    BadMagic,
    CorruptSection,
    IndexOutOfRange,
    InvalidInput,
    InvalidLevel,
    TargetExceedsData,
    VersionMismatch,
)
from .hierarchy import ClusterTree


@dataclass
class AllocationPlan:
    target: int
    sizes: np.ndarray
    n: int
    quotas: np.ndarray
    achieved: int
    level: int | None = None
    cluster: int | None = None

    @property
    def gap(self) -> int:
        return abs(self.target - self.achieved)


def saturated_total(m: int, sizes: np.ndarray) -> int:
    """sum_i min(m, s_i)."""
    return int(np.minimum(sizes, m).sum())


def allocate(N: int, sizes) -> AllocationPlan:
    """Pick the per-child cap ``n`` in [0, N] whose saturated total is closest to N.

    Ties between two caps resolve to the smaller one, so the budget is never
    exceeded when undershooting by the same amount is possible.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    N = int(N)
    if N < 0:
        raise InvalidInput(f"target must be non-negative, got {N}")
    if sizes.ndim != 1:
        raise InvalidInput("sizes must be one-dimensional")
    if len(sizes) == 0:
        if N > 0:
            raise InvalidInput("cannot allocate a positive target over no clusters")
        return AllocationPlan(N, sizes, 0, sizes.copy(), 0)
    if (sizes < 1).any():
        raise InvalidInput("cluster sizes must be >= 1")

    goal = min(N, saturated_total(N, sizes))
    # smallest m in [0, N] with f(m) >= goal; f is non-decreasing
    lo, hi = 0, N
    while lo < hi:
        mid = (lo + hi) // 2
        if saturated_total(mid, sizes) >= goal:
            hi = mid
        else:
            lo = mid + 1
    n = lo
    if n > 0 and abs(N - saturated_total(n - 1, sizes)) <= abs(N - saturated_total(n, sizes)):
        n -= 1
    quotas = np.minimum(sizes, n)
    return AllocationPlan(N, sizes, n, quotas, int(quotas.sum()))


def fraction_to_target(fraction: float, count: int) -> int:
    """Round ``fraction * count`` half-up, using the decimal value of ``fraction``."""
    frac = Decimal(str(fraction))
    if not Decimal(0) <= frac <= Decimal(1):
        raise TargetExceedsData(f"fraction {fraction} outside [0, 1]")
    return int((frac * count).to_integral_value(rounding=ROUND_HALF_UP))


@dataclass(eq=False)
class CuratedSubset:
    row_indices: np.ndarray
    bottom_clusters: np.ndarray
    sampling_level: int
    target: int
    seed: int

    @property
    def achieved(self) -> int:
        return int(len(self.row_indices))

    def __len__(self) -> int:
        return self.achieved

    def __eq__(self, other):
        if not isinstance(other, CuratedSubset):
            return NotImplemented
        return (
            np.array_equal(self.row_indices, other.row_indices)
            and np.array_equal(self.bottom_clusters, other.bottom_clusters)
            and (self.sampling_level, self.target, self.seed)
            == (other.sampling_level, other.target, other.seed)
        )

    def validate_against(self, tree: ClusterTree) -> None:
        if len(self.row_indices) and self.row_indices.max() >= tree.count:
            raise IndexOutOfRange(
                f"subset references row {int(self.row_indices.max())} but the tree has {tree.count} rows"
            )
        if not np.array_equal(tree.base_assignment[self.row_indices], self.bottom_clusters):
            raise InvalidInput("subset provenance disagrees with the tree's bottom clusters")


def _cluster_rng(seed: int, level: int, cluster: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(level), int(cluster)]))


def allocate_tree(tree: ClusterTree, level: int, N: int) -> dict[int, int]:
    """Level-1 quotas produced by recursive allocation from ``level`` down.

    Returns ``{bottom_cluster: quota}`` for every bottom cluster with a
    positive quota.
    """
    plan = allocate(N, tree.level_sizes(level))
    frontier = {c: int(q) for c, q in enumerate(plan.quotas) if q > 0}
    for lvl in range(level, 1, -1):
        below = tree.level_sizes(lvl - 1)
        nxt: dict[int, int] = {}
        for cluster, quota in frontier.items():
            children = tree.children_of(lvl, cluster)
            sub = allocate(quota, below[children])
            for child, q in zip(children, sub.quotas):
                if q > 0:
                    nxt[int(child)] = int(q)
        frontier = nxt
    return frontier


def sample_subset(
    tree: ClusterTree,
    level: int,
    *,
    size: int | None = None,
    fraction: float | None = None,
    seed: int = 0,
    exact: bool = False,
) -> CuratedSubset:
    """Curated subset of ``size`` rows (or ``fraction`` of all rows) sampled at ``level``.

    With ``exact=True`` an overshoot is trimmed one row at a time from the
    bottom cluster holding the most sampled rows (lowest id on ties); an
    undershoot is left as is.
    """
    if not 2 <= level <= tree.depth:
        raise InvalidLevel(f"sampling level {level} outside [2, {tree.depth}]")
    if (size is None) == (fraction is None):
        raise InvalidInput("give exactly one of size or fraction")
    N = fraction_to_target(fraction, tree.count) if fraction is not None else int(size)
    if N < 0:
        raise InvalidInput(f"target size must be non-negative, got {N}")
    if N > tree.count:
        raise TargetExceedsData(f"target {N} exceeds the {tree.count} available rows")

    quotas = allocate_tree(tree, level, N)
    if exact:
        excess = sum(quotas.values()) - N
        if excess > 0:
            heap = [(-q, c) for c, q in quotas.items()]
            heapq.heapify(heap)
            for _ in range(excess):
                q, c = heapq.heappop(heap)
                quotas[c] = -q - 1
                heapq.heappush(heap, (q + 1, c))

    rows, clusters = [], []
    for cluster in sorted(quotas):
        q = quotas[cluster]
        if q <= 0:
            continue
        members = tree.members_of(1, cluster)
        # a full permutation prefix keeps trimmed draws a prefix of untrimmed ones
        picked = _cluster_rng(seed, 1, cluster).permutation(len(members))[:q]
        rows.append(members[picked])
        clusters.append(np.full(q, cluster, dtype=np.int64))
    if rows:
        row_indices = np.concatenate(rows).astype(np.int64)
        bottom = np.concatenate(clusters)
        order = np.argsort(row_indices, kind="stable")
        row_indices, bottom = row_indices[order], bottom[order]
    else:
        row_indices = np.empty(0, dtype=np.int64)
        bottom = np.empty(0, dtype=np.int64)
    return CuratedSubset(row_indices, bottom, level, N, int(seed))


def uniform_random_subset(tree: ClusterTree, size: int, seed: int = 0) -> CuratedSubset:
    """Baseline: ``size`` rows drawn uniformly without replacement, ignoring the tree."""
    if not 0 <= size <= tree.count:
        raise TargetExceedsData(f"size {size} outside [0, {tree.count}]")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBA5E]))
    rows = np.sort(rng.choice(tree.count, size=size, replace=False)).astype(np.int64)
    return CuratedSubset(rows, tree.base_assignment[rows], 1, size, int(seed))


# -- serialization ----------------------------------------------------------
#
#   b"CSS1" | u32 version | u32 flags (bit 0: u64 row indices)
#   u64 achieved | u64 target | u32 sampling_level | u64 seed
#   achieved x (row_index u32|u64, bottom_cluster u32)

MAGIC = b"CSS1"
VERSION = 1
FLAG_WIDE = 1
_HEAD = struct.Struct("<4sIIQQIQ")
_NARROW = np.dtype([("row", "<u4"), ("cluster", "<u4")])
_WIDE = np.dtype([("row", "<u8"), ("cluster", "<u4")])


def subset_save(subset: CuratedSubset, path) -> None:
    wide = len(subset.row_indices) > 0 and int(subset.row_indices.max()) > 0xFFFFFFFF
    dtype = _WIDE if wide else _NARROW
    records = np.empty(subset.achieved, dtype=dtype)
    records["row"] = subset.row_indices
    records["cluster"] = subset.bottom_clusters
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, FLAG_WIDE if wide else 0, subset.achieved,
                           subset.target, subset.sampling_level, subset.seed))
        f.write(records.tobytes())


def subset_load(path, count: int | None = None) -> CuratedSubset:
    """Read a subset file; with ``count`` given, reject rows outside [0, count)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"not a subset file (magic {buf[:4]!r})")
    if len(buf) < _HEAD.size:
        raise CorruptSection("header", "file ends inside the header")
    _, version, flags, achieved, target, level, seed = _HEAD.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatch(f"subset file version {version}, expected {VERSION}")
    dtype = _WIDE if flags & FLAG_WIDE else _NARROW
    body = buf[_HEAD.size:]
    if len(body) != achieved * dtype.itemsize:
        raise CorruptSection("records", f"expected {achieved} records, found {len(body) / dtype.itemsize:g}")
    records = np.frombuffer(body, dtype=dtype)
    rows = records["row"].astype(np.int64)
    clusters = records["cluster"].astype(np.int64)
    if len(rows) > 1 and not (np.diff(rows) > 0).all():
        raise CorruptSection("records", "row indices are not strictly increasing")
    if count is not None and len(rows) and rows.max() >= count:
        raise IndexOutOfRange(f"row {int(rows.max())} outside [0, {count})")
    return CuratedSubset(rows, clusters, int(level), int(target), int(seed))
