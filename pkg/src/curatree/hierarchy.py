"""Bottom-up hierarchical k-means tree.

Level 1 clusters the data rows, level l > 1 clusters the centroids of level
l - 1.  Levels are indexed 1..depth throughout the public API.

Tree file layout (little-endian)::

    b"HCT1" | u32 version | u32 depth
    depth x level section:
        u64 section_length
        u32 cluster_count | u32 dim (0 = centroids omitted)
        f32 centroids[cluster_count * dim]
        u32 parents[cluster_count]          (absent for the top level)
        u64 sizes[cluster_count]
    base_assignment section:
        u64 section_length | u64 count | u32 base_assignment[count]
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .embedding_store import EmbeddingMatrix
from .errors import (
    BadMagic,
    CorruptSection,
    IndexOutOfRange,
    InvalidConfig,
    InvalidLevel,
    TooFewRows,
    VersionMismatch,
)
from .kmeans_core import KMeansConfig, assign_to_centroids, kmeans_fit

log = logging.getLogger(__name__)

MAGIC = b"HCT1"
VERSION = 1
_HEAD = struct.Struct("<4sII")
_U64 = struct.Struct("<Q")
_LEVEL_HEAD = struct.Struct("<II")


@dataclass(frozen=True)
class TreeConfig:
    level_counts: tuple[int, ...]
    kmeans: KMeansConfig = field(default_factory=lambda: KMeansConfig(k=1))

    def __post_init__(self):
        object.__setattr__(self, "level_counts", tuple(int(c) for c in self.level_counts))

    @property
    def depth(self) -> int:
        return len(self.level_counts)

    def validate(self, count: int | None = None) -> None:
        counts = self.level_counts
        if len(counts) < 2:
            raise InvalidConfig(f"a tree needs at least 2 levels, got {len(counts)}")
        if any(c < 1 for c in counts):
            raise InvalidConfig(f"level counts must be positive: {list(counts)}")
        if any(a <= b for a, b in zip(counts, counts[1:])):
            raise InvalidConfig(f"level counts must be strictly decreasing: {list(counts)}")
        if count is not None and counts[0] > count:
            raise TooFewRows(f"{counts[0]} bottom clusters requested for {count} rows")


def level_seed(seed: int, level: int) -> int:
    return (int(seed) ^ int(level)) & 0xFFFFFFFFFFFFFFFF


@dataclass(eq=False)
class ClusterTree:
    # index 0 holds level 1
    centroids: list[np.ndarray | None]
    parents: list[np.ndarray]
    sizes: list[np.ndarray]
    base_assignment: np.ndarray

    @property
    def depth(self) -> int:
        return len(self.sizes)

    @property
    def count(self) -> int:
        return int(len(self.base_assignment))

    @property
    def level_counts(self) -> list[int]:
        return [len(s) for s in self.sizes]

    @property
    def has_centroids(self) -> bool:
        return all(c is not None for c in self.centroids)

    def check_level(self, level: int) -> None:
        if not 1 <= level <= self.depth:
            raise InvalidLevel(f"level {level} outside [1, {self.depth}]")

    def level_sizes(self, level: int) -> np.ndarray:
        self.check_level(level)
        return self.sizes[level - 1]

    def level_centroids(self, level: int) -> np.ndarray | None:
        self.check_level(level)
        return self.centroids[level - 1]

    def parent_of(self, level: int) -> np.ndarray:
        """Parent ids (at ``level + 1``) of every cluster at ``level``."""
        self.check_level(level)
        if level == self.depth:
            raise InvalidLevel("the top level has no parents")
        return self.parents[level - 1]

    def ancestor_map(self, from_level: int, to_level: int) -> np.ndarray:
        """For each cluster at ``from_level``, its ancestor at ``to_level``."""
        self.check_level(from_level)
        self.check_level(to_level)
        if to_level < from_level:
            raise InvalidLevel(f"cannot map level {from_level} down to {to_level}")
        mapping = np.arange(len(self.sizes[from_level - 1]), dtype=np.int64)
        for lvl in range(from_level, to_level):
            mapping = self.parents[lvl - 1][mapping]
        return mapping

    def row_labels(self, level: int) -> np.ndarray:
        """Cluster id at ``level`` for every data row."""
        return self.ancestor_map(1, level)[self.base_assignment]

    def children_of(self, level: int, cluster: int) -> np.ndarray:
        """Ids at ``level - 1`` of the children of ``cluster``."""
        if level < 2:
            raise InvalidLevel("level 1 clusters have data rows, not child clusters")
        self._check_cluster(level, cluster)
        return self._children_index[level - 2][cluster]

    def members_of(self, level: int, cluster: int) -> np.ndarray:
        self._check_cluster(level, cluster)
        if level == 1:
            return self._base_members(cluster)
        labels = self.row_labels(level)
        return np.flatnonzero(labels == cluster)

    def _check_cluster(self, level: int, cluster: int) -> None:
        self.check_level(level)
        n = len(self.sizes[level - 1])
        if not 0 <= cluster < n:
            raise IndexOutOfRange(f"cluster {cluster} outside [0, {n}) at level {level}")

    @cached_property
    def _base_order(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.base_assignment, kind="stable")
        bounds = np.concatenate(([0], np.cumsum(self.sizes[0])))
        return order, bounds

    def _base_members(self, cluster: int) -> np.ndarray:
        order, bounds = self._base_order
        return order[bounds[cluster]:bounds[cluster + 1]]

    @cached_property
    def _children_index(self) -> list[list[np.ndarray]]:
        index = []
        for lvl in range(1, self.depth):
            parent = self.parents[lvl - 1]
            order = np.argsort(parent, kind="stable")
            bounds = np.concatenate(([0], np.cumsum(np.bincount(parent, minlength=len(self.sizes[lvl])))))
            index.append([order[bounds[c]:bounds[c + 1]] for c in range(len(self.sizes[lvl]))])
        return index

    def without_centroids(self) -> "ClusterTree":
        return replace(self, centroids=[None] * self.depth)

    def validate(self) -> None:
        """Check structural invariants; raises CorruptSection on failure."""
        if self.depth < 2:
            raise CorruptSection("header", f"depth {self.depth} < 2")
        n = self.count
        base = self.base_assignment
        k1 = len(self.sizes[0])
        if n and (base.min() < 0 or base.max() >= k1):
            raise CorruptSection("base_assignment", "cluster id out of range")
        if not np.array_equal(np.bincount(base, minlength=k1), self.sizes[0]):
            raise CorruptSection("level1", "sizes disagree with base_assignment")
        for lvl in range(1, self.depth):
            parent = self.parents[lvl - 1]
            above = len(self.sizes[lvl])
            if len(parent) != len(self.sizes[lvl - 1]):
                raise CorruptSection(f"level{lvl}", "parent array length mismatch")
            if len(parent) and (parent.min() < 0 or parent.max() >= above):
                raise CorruptSection(f"level{lvl}", "parent id out of range")
            agg = np.bincount(parent, weights=self.sizes[lvl - 1], minlength=above).astype(np.int64)
            if not np.array_equal(agg, self.sizes[lvl]):
                raise CorruptSection(f"level{lvl + 1}", "sizes disagree with children")
        for lvl, sizes in enumerate(self.sizes, start=1):
            if sizes.sum() != n:
                raise CorruptSection(f"level{lvl}", "sizes do not sum to the row count")
            if (sizes < 1).any():
                raise CorruptSection(f"level{lvl}", "cluster with no reachable rows")

    def structurally_equal(self, other: "ClusterTree") -> bool:
        if self.depth != other.depth or not np.array_equal(self.base_assignment, other.base_assignment):
            return False
        for a, b in zip(self.sizes, other.sizes):
            if not np.array_equal(a, b):
                return False
        for a, b in zip(self.parents, other.parents):
            if not np.array_equal(a, b):
                return False
        for a, b in zip(self.centroids, other.centroids):
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or a.tobytes() != b.tobytes()):
                return False
        return True


def _aggregate_sizes(base: np.ndarray, parents: list[np.ndarray], level_counts) -> list[np.ndarray]:
    sizes = [np.bincount(base, minlength=level_counts[0]).astype(np.int64)]
    for lvl, parent in enumerate(parents, start=1):
        agg = np.bincount(parent, weights=sizes[-1], minlength=level_counts[lvl])
        sizes.append(agg.astype(np.int64))
    return sizes


def build_tree(data, config: TreeConfig) -> ClusterTree:
    """Cluster rows into ``level_counts[0]`` groups, then recursively cluster centroids.

    Parents come from nearest-centroid assignment of child centroids.  If that
    would leave a parent with no children (possible when k-means stopped on the
    displacement tolerance before assignments settled), the k-means labels are
    used for that level instead so every cluster keeps at least one row.
    """
    rows = data.data if isinstance(data, EmbeddingMatrix) else np.asarray(data, dtype=np.float32)
    config.validate(len(rows))
    template = config.kmeans

    fit = kmeans_fit(rows, replace(template, k=config.level_counts[0], seed=level_seed(template.seed, 1)))
    log.info("level 1: k=%d, %d iterations, inertia %.6g", fit.k, fit.iterations_run, fit.inertia)
    base = fit.assignment
    centroids = [fit.centroids.astype(np.float32)]
    parents: list[np.ndarray] = []
    for lvl in range(2, config.depth + 1):
        k = config.level_counts[lvl - 1]
        child = centroids[-1]
        fit = kmeans_fit(child, replace(template, k=k, seed=level_seed(template.seed, lvl)))
        upper = fit.centroids.astype(np.float32)
        parent = assign_to_centroids(child, upper)
        if np.bincount(parent, minlength=k).min() == 0:
            log.warning("level %d: nearest-centroid parents left a cluster empty; using k-means labels", lvl)
            parent = fit.assignment
        log.info("level %d: k=%d, %d iterations, inertia %.6g", lvl, k, fit.iterations_run, fit.inertia)
        parents.append(parent.astype(np.int64))
        centroids.append(upper)
    tree = ClusterTree(
        centroids=centroids,
        parents=parents,
        sizes=_aggregate_sizes(base, parents, config.level_counts),
        base_assignment=base.astype(np.int64),
    )
    tree.validate()
    return tree


def size_dispersion(tree: ClusterTree) -> list[dict]:
    """Per-level cluster-size summary; ``cv`` is the coefficient of variation."""
    out = []
    for lvl, sizes in enumerate(tree.sizes, start=1):
        s = sizes.astype(np.float64)
        out.append({
            "level": lvl,
            "clusters": len(s),
            "min": int(s.min()),
            "max": int(s.max()),
            "mean": float(s.mean()),
            "cv": float(s.std() / s.mean()),
        })
    return out


# -- serialization ----------------------------------------------------------

def save_tree(tree: ClusterTree, path, include_centroids: bool = True) -> None:
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, tree.depth))
        for lvl in range(1, tree.depth + 1):
            sizes = tree.sizes[lvl - 1]
            cent = tree.centroids[lvl - 1] if include_centroids else None
            dim = 0 if cent is None else cent.shape[1]
            parts = [_LEVEL_HEAD.pack(len(sizes), dim)]
            if cent is not None:
                parts.append(np.ascontiguousarray(cent, dtype="<f4").tobytes())
            if lvl < tree.depth:
                parts.append(tree.parents[lvl - 1].astype("<u4").tobytes())
            parts.append(sizes.astype("<u8").tobytes())
            body = b"".join(parts)
            f.write(_U64.pack(len(body)))
            f.write(body)
        body = _U64.pack(tree.count) + tree.base_assignment.astype("<u4").tobytes()
        f.write(_U64.pack(len(body)))
        f.write(body)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, section: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptSection(section, "file ends inside section")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def load_tree(path) -> ClusterTree:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"not a tree file (magic {buf[:4]!r})")
    r = _Reader(buf)
    _, version, depth = _HEAD.unpack(r.take(_HEAD.size, "header"))
    if version != VERSION:
        raise VersionMismatch(f"tree file version {version}, expected {VERSION}")
    if depth < 2:
        raise CorruptSection("header", f"depth {depth} < 2")
    centroids, parents, sizes = [], [], []
    for lvl in range(1, depth + 1):
        name = f"level{lvl}"
        (length,) = _U64.unpack(r.take(8, name))
        sec = _Reader(r.take(length, name))
        k, dim = _LEVEL_HEAD.unpack(sec.take(_LEVEL_HEAD.size, name))
        if dim:
            centroids.append(np.frombuffer(sec.take(4 * k * dim, name), dtype="<f4").reshape(k, dim).astype(np.float32))
        else:
            centroids.append(None)
        if lvl < depth:
            parents.append(np.frombuffer(sec.take(4 * k, name), dtype="<u4").astype(np.int64))
        sizes.append(np.frombuffer(sec.take(8 * k, name), dtype="<u8").astype(np.int64))
        if sec.pos != len(sec.buf):
            raise CorruptSection(name, "section length disagrees with its contents")
    (length,) = _U64.unpack(r.take(8, "base_assignment"))
    sec = _Reader(r.take(length, "base_assignment"))
    (count,) = _U64.unpack(sec.take(8, "base_assignment"))
    base = np.frombuffer(sec.take(4 * count, "base_assignment"), dtype="<u4").astype(np.int64)
    if sec.pos != len(sec.buf):
        raise CorruptSection("base_assignment", "section length disagrees with its contents")
    if r.pos != len(buf):
        raise CorruptSection("trailer", "unexpected bytes after the last section")
    tree = ClusterTree(centroids=centroids, parents=parents, sizes=sizes, base_assignment=base)
    dims = {c.shape[1] for c in centroids if c is not None}
    if len(dims) > 1:
        raise CorruptSection("centroids", f"levels disagree on dimensionality {sorted(dims)}")
    tree.validate()
    return tree
