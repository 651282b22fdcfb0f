"""Unsupervised data curation for large embedding collections."""

__version__ = "0.1.0"

from .batch_stratifier import (
    BatchPlan,
    ObservationLedger,
    iter_stratified,
    ledger_report,
    plan_random,
    plan_stratified,
)
from .curation_sampler import (
    AllocationPlan,
    CuratedSubset,
    allocate,
    sample_subset,
    subset_load,
    subset_save,
)
from .diagnostics import (
    adjusted_rand_index,
    cluster_size_histogram,
    generate_heavy_tailed,
    tv_curve,
    tv_distance,
)
from .embedding_store import EmbeddingMatrix, RowMetadata, load_embeddings, load_metadata, write_embeddings
from .hierarchy import ClusterTree, TreeConfig, build_tree, load_tree, save_tree
from .kmeans_core import KMeansConfig, KMeansResult, assign_to_centroids, kmeans_fit

__all__ = [
    "AllocationPlan",
    "BatchPlan",
    "ClusterTree",
    "CuratedSubset",
    "EmbeddingMatrix",
    "KMeansConfig",
    "KMeansResult",
    "ObservationLedger",
    "RowMetadata",
    "TreeConfig",
    "adjusted_rand_index",
    "allocate",
    "assign_to_centroids",
    "build_tree",
    "cluster_size_histogram",
    "generate_heavy_tailed",
    "iter_stratified",
    "kmeans_fit",
    "ledger_report",
    "load_embeddings",
    "load_metadata",
    "load_tree",
    "plan_random",
    "plan_stratified",
    "sample_subset",
    "save_tree",
    "subset_load",
    "subset_save",
    "tv_curve",
    "tv_distance",
    "write_embeddings",
]
