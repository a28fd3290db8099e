from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.decomposition import PCA

from .._jsonutil import dumps_line
from ..classify import HazardRationale
from ..errors import UnknownCluster
from ..gateway import BackendConfig, ModelGateway
from .hdbscan import ClusterAssignment, distance_matrix


@dataclass(frozen=True)
class EmbeddingSet:
    vectors: np.ndarray
    rationale_refs: tuple[HazardRationale, ...]
    model_tag: str = ""

    def __post_init__(self):
        V = np.asarray(self.vectors, dtype=np.float64)
        if V.ndim != 2 or V.shape[0] != len(self.rationale_refs):
            raise ValueError("vectors must be an N x m matrix aligned with rationale_refs")
        if not np.all(np.isfinite(V)):
            raise ValueError("embedding matrix has non-finite entries")
        object.__setattr__(self, "vectors", V)
        object.__setattr__(self, "rationale_refs", tuple(self.rationale_refs))

    def __len__(self) -> int:
        return len(self.rationale_refs)


def _unit_rows(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    return V / np.where(norms == 0.0, 1.0, norms)


def embed_rationales(rationales: Sequence[HazardRationale], gateway, normalize: bool = True) -> EmbeddingSet:
    """Embed rationale texts; rows are unit-normalised unless told otherwise."""
    rationales = list(rationales)
    if not rationales:
        raise ValueError("no rationales to embed")
    if isinstance(gateway, BackendConfig):
        gateway = ModelGateway(gateway)
    vecs = gateway.embed([r.text for r in rationales])
    V = np.vstack([v.values for v in vecs])
    if normalize:
        V = _unit_rows(V)
    return EmbeddingSet(V, tuple(rationales), gateway.cfg.tag)


class RationaleEmbedder(TransformerMixin, BaseEstimator):
    """Stateless transformer: list of texts -> unit-norm embedding matrix."""

    def __init__(self, gateway=None, normalize: bool = True):
        self.gateway = gateway
        self.normalize = normalize

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        gateway = self.gateway or ModelGateway(BackendConfig())
        if isinstance(gateway, BackendConfig):
            gateway = ModelGateway(gateway)
        texts = [getattr(x, "text", x) for x in X]
        if not texts:
            return np.empty((0, 0))
        V = np.vstack([v.values for v in gateway.embed(texts)])
        return _unit_rows(V) if self.normalize else V


@dataclass(frozen=True)
class ClusterSummary:
    cluster_id: int
    size: int
    medoid_index: int
    exemplar_rationales: tuple[str, ...]
    archetype_label: Optional[str] = None

    def to_table_row(self) -> dict:
        return {
            "ID": self.cluster_id,
            "Samples": self.size,
            "Archetype": self.archetype_label,
            "Example Rationale": self.exemplar_rationales[0] if self.exemplar_rationales else None,
            "exemplars": list(self.exemplar_rationales),
        }


def summarize_clusters(
    assignment: ClusterAssignment,
    Z,
    rationales: Optional[Sequence[HazardRationale]] = None,
    top_k: int = 5,
    metric: str = "euclidean",
) -> list[ClusterSummary]:
    """Size, medoid and nearest-to-medoid exemplars per cluster, largest first."""
    V = np.asarray(getattr(Z, "vectors", Z), dtype=np.float64)
    if rationales is None:
        rationales = getattr(Z, "rationale_refs")
    texts = [getattr(r, "text", r) for r in rationales]
    out = []
    for cid in sorted(assignment.stabilities):
        idx = assignment.members(cid)
        D = distance_matrix(V[idx], metric)
        medoid_local = int(np.argmin(D.sum(axis=1)))
        order = np.lexsort((idx, D[medoid_local]))[:top_k]
        out.append(ClusterSummary(
            cluster_id=int(cid),
            size=int(idx.size),
            medoid_index=int(idx[medoid_local]),
            exemplar_rationales=tuple(texts[int(idx[j])] for j in order),
        ))
    out.sort(key=lambda s: (-s.size, s.cluster_id))
    return out


def select_cluster(
    assignment: ClusterAssignment,
    cluster_id: int,
    rationales: Sequence[HazardRationale],
) -> list[HazardRationale]:
    if cluster_id < 0 or cluster_id not in assignment.stabilities:
        raise UnknownCluster(f"no cluster with id {cluster_id}")
    return [rationales[int(i)] for i in assignment.members(cluster_id)]


def assignment_to_jsonl(assignment: ClusterAssignment, refs: Sequence[HazardRationale]) -> str:
    return "".join(
        dumps_line({"rationale_ref": r.record_id, "text": r.text, "label": int(lab),
                    "probability": round(float(p), 12)})
        + "\n"
        for r, lab, p in zip(refs, assignment.labels, assignment.probabilities)
    )


def assignment_from_jsonl(
    text: str, stabilities: Optional[dict] = None
) -> tuple[ClusterAssignment, list[HazardRationale]]:
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    probs = np.array([r["probability"] for r in rows], dtype=np.float64)
    known = {int(k): float(v) for k, v in (stabilities or {}).items()}
    stabilities = {int(c): known.get(int(c), float("nan"))
                   for c in sorted(set(labels.tolist())) if c >= 0}
    refs = [HazardRationale(r["text"], int(r["rationale_ref"])) for r in rows]
    return ClusterAssignment(labels, probs, stabilities), refs


def pca_2d(Z) -> np.ndarray:
    """Optional 2-D projection for scatter plots (deterministic, unlike t-SNE)."""
    V = np.asarray(getattr(Z, "vectors", Z), dtype=np.float64)
    if V.shape[0] < 2:
        return np.zeros((V.shape[0], 2))
    k = min(2, V.shape[1], V.shape[0])
    P = PCA(n_components=k, svd_solver="full").fit_transform(V)
    if k < 2:
        P = np.hstack([P, np.zeros((P.shape[0], 2 - k))])
    # fix sign so repeated runs agree
    for j in range(2):
        col = P[:, j]
        pivot = np.argmax(np.abs(col))
        if col[pivot] < 0:
            P[:, j] = -col
    return P
