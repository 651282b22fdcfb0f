"""Training-batch plans over a curated subset.

Stratified mode gives every top-level cluster an equal share of each batch
(the ``B mod k`` leftover slots rotate across batches) and, inside a cluster,
always draws from the tiles observed the fewest times so far.  Random mode is
the unstratified baseline.
"""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

from .curation_sampler import CuratedSubset
from .errors import (
    BadMagic,
    BatchTooLarge,
    BatchTooSmall,
    CorruptSection,
    EmptySubset,
    InvalidInput,
)
from .hierarchy import ClusterTree

log = logging.getLogger(__name__)

MODES = ("stratified", "random")


@dataclass
class Batch:
    index: int
    rows: np.ndarray
    composition: dict[int, int]
    # clusters that could not fill their nominal quota in this batch
    deficit: tuple[int, ...] = ()

    def to_json(self) -> str:
        return json.dumps({
            "batch": self.index,
            "indices": [int(r) for r in self.rows],
            "composition": {str(c): int(n) for c, n in sorted(self.composition.items())},
        })


@dataclass
class BatchPlan:
    batch_size: int
    mode: str
    batches: list[Batch] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    @property
    def deficit_events(self) -> list[tuple[int, int]]:
        return [(b.index, c) for b in self.batches for c in b.deficit]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for batch in self.batches:
                f.write(batch.to_json() + "\n")


def load_batch_plan(path, batch_size: int | None = None, mode: str = "stratified") -> BatchPlan:
    batches = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            batches.append(Batch(
                index=int(obj["batch"]),
                rows=np.asarray(obj["indices"], dtype=np.int64),
                composition={int(c): int(n) for c, n in obj["composition"].items()},
            ))
    if batch_size is None:
        batch_size = len(batches[0].rows) if batches else 0
    return BatchPlan(batch_size, mode, batches)


@dataclass
class ObservationLedger:
    """Per-tile observation counts; positions index ``subset.row_indices``."""

    counts: np.ndarray
    cluster_index: dict[int, np.ndarray]
    seed: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def fresh(cls, subset: CuratedSubset, tree: ClusterTree | None, seed: int = 0) -> "ObservationLedger":
        return cls(np.zeros(subset.achieved, dtype=np.int64), cluster_positions(subset, tree), int(seed))

    def observe(self, positions: np.ndarray) -> None:
        np.add.at(self.counts, positions, 1)

    def spread(self) -> dict[int, int]:
        """max - min count inside every cluster."""
        return {c: int(self.counts[p].max() - self.counts[p].min()) for c, p in self.cluster_index.items()}


def top_level_clusters(subset: CuratedSubset, tree: ClusterTree) -> np.ndarray:
    """Top-level cluster id of every tile in the subset."""
    subset.validate_against(tree)
    return tree.ancestor_map(1, tree.depth)[subset.bottom_clusters]


def cluster_positions(subset: CuratedSubset, tree: ClusterTree | None) -> dict[int, np.ndarray]:
    if tree is None:
        return {0: np.arange(subset.achieved)}
    labels = top_level_clusters(subset, tree)
    order = np.argsort(labels, kind="stable")
    ids, starts = np.unique(labels[order], return_index=True)
    bounds = list(starts) + [len(order)]
    return {int(c): order[bounds[i]:bounds[i + 1]] for i, c in enumerate(ids)}


def batch_quotas(batch_size: int, capacities, batch_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster slot counts for one batch.

    Every cluster gets ``min(n, capacity)`` for the largest ``n`` that fits,
    then the leftover slots go one each to clusters that can still take a
    tile, scanning cyclically from ``batch_index mod k``.  Without capacity
    limits this is ``B // k`` each plus a rotating ``+1`` for ``B mod k``
    clusters.  Returns ``(quotas, deficient)`` where ``deficient`` flags
    clusters whose capacity fell short of their nominal share or of the
    water level the others were filled to.  Unflagged clusters always get
    ``n`` or ``n + 1``.
    """
    caps = np.asarray(capacities, dtype=np.int64)
    k = len(caps)
    if batch_size > caps.sum():
        raise BatchTooLarge(f"batch size {batch_size} exceeds the {int(caps.sum())} tiles available")
    lo, hi = 0, batch_size
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if np.minimum(caps, mid).sum() <= batch_size:
            lo = mid
        else:
            hi = mid - 1
    n = lo
    quotas = np.minimum(caps, n)
    leftover = batch_size - int(quotas.sum())
    start = batch_index % k
    for j in range(k):
        if leftover == 0:
            break
        c = (start + j) % k
        if caps[c] > n:
            quotas[c] += 1
            leftover -= 1

    base, rem = divmod(batch_size, k)
    nominal = np.full(k, base, dtype=np.int64)
    nominal[(start + np.arange(rem)) % k] += 1
    return quotas, (caps < nominal) | (caps < n)


def _least_observed(counts: np.ndarray, quota: int, rng: np.random.Generator) -> np.ndarray:
    """Local indices of ``quota`` tiles, lowest count first, uniform within a count."""
    if quota >= len(counts):
        keys = counts + rng.random(len(counts))
        return np.argsort(keys)
    keys = counts + rng.random(len(counts))
    picked = np.argpartition(keys, quota - 1)[:quota]
    return picked[np.argsort(keys[picked])]


def _check_batch_args(subset: CuratedSubset, batch_size: int) -> None:
    if subset.achieved == 0:
        raise EmptySubset("the curated subset has no rows")
    if batch_size < 1:
        raise BatchTooSmall(f"batch size must be >= 1, got {batch_size}")
    if batch_size > subset.achieved:
        raise BatchTooLarge(f"batch size {batch_size} exceeds the subset size {subset.achieved}")


def iter_stratified(
    subset: CuratedSubset,
    tree: ClusterTree,
    batch_size: int,
    seed: int = 0,
    ledger: ObservationLedger | None = None,
) -> Iterator[Batch]:
    """Endless stream of stratified batches, updating ``ledger`` as it goes.

    Passing a ledger restored from a checkpoint resumes the stream: the next
    batch index is recovered from the number of tiles already emitted.
    """
    _check_batch_args(subset, batch_size)
    if ledger is None:
        ledger = ObservationLedger.fresh(subset, tree, seed)
    if ledger.total % batch_size:
        raise InvalidInput(f"ledger holds {ledger.total} observations, not a multiple of {batch_size}")
    clusters = sorted(ledger.cluster_index)
    positions = [ledger.cluster_index[c] for c in clusters]
    caps = np.array([len(p) for p in positions], dtype=np.int64)
    index = ledger.total // batch_size
    warned = False
    while True:
        quotas, deficient = batch_quotas(batch_size, caps, index)
        if deficient.any() and not warned:
            log.warning(
                "batch %d: clusters %s are smaller than their share; redistributing their deficit",
                index, [clusters[i] for i in np.flatnonzero(deficient)],
            )
            warned = True
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), index]))
        chosen, composition = [], {}
        for c, pos, q in zip(clusters, positions, quotas):
            if q == 0:
                continue
            local = _least_observed(ledger.counts[pos], int(q), rng)[:q]
            chosen.append(pos[local])
            composition[c] = int(q)
        picked = np.concatenate(chosen)
        ledger.observe(picked)
        yield Batch(
            index=index,
            rows=subset.row_indices[picked],
            composition=composition,
            deficit=tuple(clusters[i] for i in np.flatnonzero(deficient)),
        )
        index += 1


def plan_stratified(
    subset: CuratedSubset,
    tree: ClusterTree,
    batch_size: int,
    num_batches: int,
    seed: int = 0,
    ledger: ObservationLedger | None = None,
) -> tuple[BatchPlan, ObservationLedger]:
    if ledger is None:
        _check_batch_args(subset, batch_size)
        ledger = ObservationLedger.fresh(subset, tree, seed)
    plan = BatchPlan(batch_size, "stratified")
    stream = iter_stratified(subset, tree, batch_size, seed, ledger)
    for _ in range(num_batches):
        plan.batches.append(next(stream))
    return plan, ledger


def plan_random(
    subset: CuratedSubset,
    batch_size: int,
    num_batches: int,
    seed: int = 0,
    tree: ClusterTree | None = None,
    ledger: ObservationLedger | None = None,
) -> BatchPlan:
    """Batches of distinct tiles drawn uniformly from the subset, independently per batch.

    With ``tree`` given, each batch's composition counts top-level clusters.
    ``ledger``, if given, is updated with every draw.
    """
    _check_batch_args(subset, batch_size)
    labels = top_level_clusters(subset, tree) if tree is not None else None
    plan = BatchPlan(batch_size, "random")
    first = ledger.total // batch_size if ledger is not None else 0
    for index in range(first, first + num_batches):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), index, 1]))
        picked = rng.choice(subset.achieved, size=batch_size, replace=False)
        composition = {}
        if labels is not None:
            ids, counts = np.unique(labels[picked], return_counts=True)
            composition = {int(c): int(n) for c, n in zip(ids, counts)}
        if ledger is not None:
            ledger.observe(picked)
        plan.batches.append(Batch(index, subset.row_indices[picked], composition))
    return plan


def ledger_report(ledger: ObservationLedger) -> dict:
    counts = ledger.counts
    per_cluster = {}
    for c, pos in sorted(ledger.cluster_index.items()):
        sub = counts[pos]
        per_cluster[c] = {
            "tiles": int(len(sub)),
            "min": int(sub.min()) if len(sub) else 0,
            "max": int(sub.max()) if len(sub) else 0,
            "mean": float(sub.mean()) if len(sub) else 0.0,
        }
    return {
        "tiles": int(len(counts)),
        "observations": int(counts.sum()),
        "coverage": float((counts >= 1).mean()) if len(counts) else 0.0,
        "multiplicity": int(counts.min()) if len(counts) else 0,
        "clusters": per_cluster,
    }


# -- ledger checkpoint: b"LGR1" | u64 n | u64 counts[n] ----------------------

LEDGER_MAGIC = b"LGR1"
_LEDGER_HEAD = struct.Struct("<4sQ")


def save_ledger(ledger: ObservationLedger, path) -> None:
    with open(path, "wb") as f:
        f.write(_LEDGER_HEAD.pack(LEDGER_MAGIC, len(ledger.counts)))
        f.write(ledger.counts.astype("<u8").tobytes())


def load_ledger_counts(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != LEDGER_MAGIC:
        raise BadMagic(f"not a ledger checkpoint (magic {buf[:4]!r})")
    if len(buf) < _LEDGER_HEAD.size:
        raise CorruptSection("header", "file ends inside the header")
    _, n = _LEDGER_HEAD.unpack_from(buf)
    body = buf[_LEDGER_HEAD.size:]
    if len(body) != 8 * n:
        raise CorruptSection("counts", f"expected {n} counts")
    return np.frombuffer(body, dtype="<u8").astype(np.int64)


def load_ledger(path, subset: CuratedSubset, tree: ClusterTree | None, seed: int = 0) -> ObservationLedger:
    counts = load_ledger_counts(path)
    if len(counts) != subset.achieved:
        raise InvalidInput(f"ledger has {len(counts)} counts, subset has {subset.achieved} tiles")
    return ObservationLedger(counts, cluster_positions(subset, tree), int(seed))
