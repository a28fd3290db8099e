"""Embedding, density clustering and archetype selection of hazard rationales."""

from .archetypes import (
    ClusterSummary,
    EmbeddingSet,
    RationaleEmbedder,
    assignment_from_jsonl,
    assignment_to_jsonl,
    embed_rationales,
    pca_2d,
    select_cluster,
    summarize_clusters,
)
from .hdbscan import HDBSCAN, ClusterAssignment, HdbscanParams, hdbscan_fit

__all__ = [
    "HDBSCAN",
    "ClusterAssignment",
    "ClusterSummary",
    "EmbeddingSet",
    "HdbscanParams",
    "RationaleEmbedder",
    "assignment_from_jsonl",
    "assignment_to_jsonl",
    "embed_rationales",
    "hdbscan_fit",
    "pca_2d",
    "select_cluster",
    "summarize_clusters",
]
