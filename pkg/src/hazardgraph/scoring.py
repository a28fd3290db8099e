"""Image evaluation metrics.

* VQA graph score: per-assertion yes-probabilities aggregated over the
  scene graph, with the hazard node and its incident edges up-weighted.
* Embedding alignment (CLIP-style cosine) and match-head probability
  (BLIP-style) as holistic baselines.
* Frechet distance between Gaussian summaries of image features.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from sklearn.utils.validation import check_array

from .errors import (
    AuthFailure,
    DimensionMismatch,
    GatewayError,
    MissingAssertionScore,
    NoHazardNode,
    NotPSD,
    PartialScores,
    ScoreOutOfRange,
    TooFewSamples,
    ZeroVector,
)
from .gateway import ImageArtifact, ModelGateway, VqaQuery
from .scenegraph import Assertion, SceneGraph, graph_to_assertions

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-6
SYMMETRY_TOLERANCE = 1e-10


# ---------------------------------------------------------------------------
# VQA graph score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Weights:
    """Up-weighting of the hazard node (``lambda_node``) and its edges
    (``gamma_edge``). Values of 1.0 reduce the score to a plain mean."""

    lambda_node: float = 2.0
    gamma_edge: float = 1.5

    def __post_init__(self):
        for name in ("lambda_node", "gamma_edge"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 1.0:
                raise ValueError(f"{name} must be >= 1, got {value}")

    def to_dict(self) -> dict:
        return {"lambda_node": self.lambda_node, "gamma_edge": self.gamma_edge}


@dataclass(frozen=True)
class GraphScoreBreakdown:
    graph_id: str
    node_scores: dict[str, float]
    edge_scores: dict[int, float]
    node_weights: dict[str, float]
    edge_weights: dict[int, float]
    s_graph: float
    assertion_scores: dict[str, float]
    weights: Weights = field(default_factory=Weights)

    def recompute(self) -> float:
        """Weighted average rebuilt from the stored components."""
        num = math.fsum(self.node_weights[k] * v for k, v in self.node_scores.items())
        num += math.fsum(self.edge_weights[k] * v for k, v in self.edge_scores.items())
        den = math.fsum(self.node_weights[k] for k in self.node_scores)
        den += math.fsum(self.edge_weights[k] for k in self.edge_scores)
        return num / den

    def to_dict(self) -> dict:
        return {
            "graph_id": self.graph_id,
            "s_graph": self.s_graph,
            "weights": self.weights.to_dict(),
            "node_scores": self.node_scores,
            "node_weights": self.node_weights,
            "edge_scores": {str(k): v for k, v in self.edge_scores.items()},
            "edge_weights": {str(k): v for k, v in self.edge_weights.items()},
            "assertion_scores": self.assertion_scores,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphScoreBreakdown":
        return cls(
            graph_id=d["graph_id"],
            node_scores=dict(d["node_scores"]),
            edge_scores={int(k): v for k, v in d["edge_scores"].items()},
            node_weights=dict(d["node_weights"]),
            edge_weights={int(k): v for k, v in d["edge_weights"].items()},
            s_graph=d["s_graph"],
            assertion_scores=dict(d["assertion_scores"]),
            weights=Weights(**d["weights"]),
        )


def aggregate_graph_score(
    g: SceneGraph,
    scores: Mapping[str, float],
    weights: Weights = Weights(),
    assertions: Optional[Sequence[Assertion]] = None,
) -> GraphScoreBreakdown:
    """Weighted graph-level compliance score.

    Node score is the mean of its attribute-assertion scores; edge score is
    its single relation-assertion score. The hazard node gets weight
    ``lambda_node`` and edges touching it get ``gamma_edge``; everything else
    weighs 1. Nodes without attributes are left out of both sums.

    Raises:
        MissingAssertionScore: an assertion of ``g`` has no entry in ``scores``.
        ScoreOutOfRange: a score lies outside [0, 1].
    """
    try:
        hazard_id = g.hazard.node_id
    except StopIteration:  # pragma: no cover - SceneGraph already enforces this
        raise NoHazardNode(g.graph_id) from None
    assertions = graph_to_assertions(g) if assertions is None else list(assertions)

    used: dict[str, float] = {}
    per_node: dict[str, list[float]] = {}
    edge_scores: dict[int, float] = {}
    for a in assertions:
        if a.assertion_id not in scores:
            raise MissingAssertionScore(a.assertion_id)
        s = float(scores[a.assertion_id])
        if not 0.0 <= s <= 1.0:
            raise ScoreOutOfRange(f"{a.assertion_id}: {s} outside [0, 1]")
        used[a.assertion_id] = s
        if a.kind == "attribute":
            per_node.setdefault(a.subject, []).append(s)
        else:
            edge_scores[a.edge_index] = s

    node_scores = {nid: math.fsum(v) / len(v) for nid, v in per_node.items()}
    node_weights = {nid: (weights.lambda_node if nid == hazard_id else 1.0) for nid in node_scores}
    edge_weights = {
        k: (weights.gamma_edge if g.incident_to_hazard(g.edges[k]) else 1.0) for k in edge_scores
    }
    num = math.fsum(node_weights[k] * v for k, v in node_scores.items())
    num += math.fsum(edge_weights[k] * v for k, v in edge_scores.items())
    den = math.fsum(node_weights.values()) + math.fsum(edge_weights.values())
    s_graph = num / den if den > 0 else 0.0
    return GraphScoreBreakdown(
        graph_id=g.graph_id,
        node_scores=node_scores,
        edge_scores=edge_scores,
        node_weights=node_weights,
        edge_weights=edge_weights,
        s_graph=s_graph,
        assertion_scores=used,
        weights=weights,
    )


def score_assertions(
    image: ImageArtifact,
    assertions: Sequence[Assertion],
    gateway: ModelGateway,
) -> dict[str, float]:
    """Ask the VQA backend about every assertion.

    Raises:
        PartialScores: one or more assertions failed after retries; the
            exception carries the scores that did succeed. Failed items are
            missing from that map, never zero.
    """
    assertions = list(assertions)
    if not assertions:
        raise ValueError("no assertions to score")

    def one(a: Assertion):
        try:
            return a.assertion_id, gateway.answer_assertion(VqaQuery(image, a.text)), None
        except AuthFailure:
            raise
        except GatewayError as exc:
            return a.assertion_id, None, exc

    with ThreadPoolExecutor(max_workers=gateway.cfg.max_in_flight) as pool:
        results = list(pool.map(one, assertions))
    scores = {aid: s for aid, s, err in results if err is None}
    failures = {aid: err for aid, _, err in results if err is not None}
    if failures:
        raise PartialScores(scores, failures)
    return scores


# ---------------------------------------------------------------------------
# holistic baselines
# ---------------------------------------------------------------------------


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise DimensionMismatch(f"{u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def embedding_alignment_score(prompt: str, image: ImageArtifact, gateway: ModelGateway) -> float:
    """Raw cosine between joint text and image embeddings (no rescaling)."""
    u, v = gateway.joint_embed(prompt, image)
    return cosine_similarity(u, v)


def match_head_score(prompt: str, image: ImageArtifact, gateway: ModelGateway) -> float:
    """Backend image-text match probability, passed through unchanged."""
    value = gateway.match_probability(prompt, image)
    if not 0.0 <= value <= 1.0:  # gateway already checks; keep the contract local
        raise ScoreOutOfRange(f"match probability {value} outside [0, 1]")
    return value


# ---------------------------------------------------------------------------
# Frechet distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FidStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        mu = np.asarray(self.mean, dtype=np.float64).ravel()
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise DimensionMismatch(f"covariance {cov.shape} does not match mean ({mu.size},)")
        scale = max(1.0, float(np.max(np.abs(cov))) if cov.size else 1.0)
        if not np.allclose(cov, cov.T, rtol=0.0, atol=SYMMETRY_TOLERANCE * scale):
            raise NotPSD("covariance is not symmetric")
        if self.sample_count < 2:
            raise TooFewSamples("need at least 2 samples")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)


def fid_stats(features) -> FidStats:
    """Sample mean and unbiased (N-1) covariance of an N x m feature matrix."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 2 and X.shape[0] < 2:
        raise TooFewSamples(f"need at least 2 samples, got {X.shape[0]}")
    X = check_array(X, ensure_min_samples=2, dtype=np.float64)
    mu = X.mean(axis=0)
    centered = X - mu
    cov = centered.T @ centered / (X.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return FidStats(mu, cov, X.shape[0])


def _psd_sqrt(sigma: np.ndarray, what: str) -> np.ndarray:
    w, V = np.linalg.eigh(sigma)
    scale = max(1.0, float(np.max(np.abs(w))))
    if w.min() < -PSD_TOLERANCE * scale:
        raise NotPSD(f"{what} has eigenvalue {w.min():.3g}")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """Tr((A B)^1/2) via the symmetric form (A^1/2 B A^1/2)^1/2."""
    root_a = _psd_sqrt(sigma_a, "first covariance")
    inner = root_a @ sigma_b @ root_a
    inner = 0.5 * (inner + inner.T)
    w = np.linalg.eigvalsh(inner)
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def fid(real: FidStats, gen: FidStats) -> float:
    if real.mean.shape != gen.mean.shape:
        raise DimensionMismatch(f"{real.mean.shape} vs {gen.mean.shape}")
    _psd_sqrt(gen.covariance, "second covariance")  # validates PSD
    diff = real.mean - gen.mean
    value = (
        float(diff @ diff)
        + float(np.trace(real.covariance))
        + float(np.trace(gen.covariance))
        - 2.0 * trace_sqrt_product(real.covariance, gen.covariance)
    )
    return max(value, 0.0)
