"""Builders shared by the unit and acceptance tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from hypothesis import strategies as st

from hazardgraph.scenegraph import SceneEdge, SceneGraph, SceneNode

FIXTURES = Path(__file__).parent / "fixtures"
SIR_20 = FIXTURES / "sir_20.csv"
RUN_ALL_CONFIG = FIXTURES / "run_all.toml"

OBJECTS = ["crate", "ladder", "forklift", "pallet", "cord", "bucket", "shelf", "hose", "cart", "drum"]
ATTRS = ["red", "wet", "metal", "broken", "tall", "loose", "rusty", "unsecured", "open", "tilted"]
RELATIONS = ["on", "near", "under", "blocking", "leaning against", "next to", "behind"]


def random_graph(rng: np.random.Generator, graph_id: str = "g", max_nodes: int = 6,
                 max_attrs: int = 3, unique_labels: bool = True) -> SceneGraph:
    """Connected random graph whose hazard node always has at least one edge."""
    n = int(rng.integers(2, max_nodes + 1))
    hazard = int(rng.integers(n))
    nodes = []
    for i in range(n):
        label = OBJECTS[int(rng.integers(len(OBJECTS)))]
        if unique_labels:
            label = f"{label} {graph_id}-{i}"
        k = int(rng.integers(0, max_attrs + 1))
        attrs = tuple(rng.choice(ATTRS, size=k, replace=False).tolist())
        nodes.append(SceneNode(f"n{i}", label, attrs, i == hazard))
    # spanning tree grown from the hazard node keeps everything connected
    order = [hazard] + [i for i in rng.permutation(n).tolist() if i != hazard]
    edges = []
    for pos in range(1, n):
        a, b = order[pos], order[int(rng.integers(pos))]
        src, tgt = (a, b) if rng.random() < 0.5 else (b, a)
        edges.append(SceneEdge(f"n{src}", f"n{tgt}", RELATIONS[int(rng.integers(len(RELATIONS)))]))
    for _ in range(int(rng.integers(0, 3))):
        a, b = rng.choice(n, size=2, replace=False).tolist()
        edges.append(SceneEdge(f"n{a}", f"n{b}", RELATIONS[int(rng.integers(len(RELATIONS)))]))
    return SceneGraph(graph_id, tuple(nodes), tuple(edges), f"rationale for {graph_id}", None)


@st.composite
def scene_graphs(draw, max_nodes: int = 6):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_graph(np.random.default_rng(seed), f"g{seed}", max_nodes=max_nodes)


def two_blob_fixture(seed: int = 0, dim: int = 8, per_blob: int = 60, sigma: float = 0.05,
                     n_noise: int = 10):
    """Two Gaussian blobs 1.0 apart plus uniform background noise.

    Returns ``(X, truth)`` with truth labels 0, 1 and -1 for noise.
    """
    rng = np.random.default_rng(seed)
    c0 = np.zeros(dim)
    c1 = np.zeros(dim)
    c1[0] = 1.0
    a = c0 + sigma * rng.standard_normal((per_blob, dim))
    b = c1 + sigma * rng.standard_normal((per_blob, dim))
    noise = rng.uniform(-0.5, 1.5, size=(n_noise, dim))
    X = np.vstack([a, b, noise])
    truth = np.array([0] * per_blob + [1] * per_blob + [-1] * n_noise)
    return X, truth


def matched_agreement(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of points whose label agrees with truth under the best cluster relabelling."""
    from scipy.optimize import linear_sum_assignment

    pred_ids = sorted(set(labels.tolist()) - {-1})
    true_ids = sorted(set(truth.tolist()) - {-1})
    C = np.zeros((len(pred_ids), len(true_ids)))
    for i, p in enumerate(pred_ids):
        for j, t in enumerate(true_ids):
            C[i, j] = np.sum((labels == p) & (truth == t))
    rows, cols = linear_sum_assignment(-C)
    mapping = {pred_ids[r]: true_ids[c] for r, c in zip(rows, cols)}
    mapped = np.array([mapping.get(l, -2) if l >= 0 else -1 for l in labels.tolist()])
    return float(np.mean(mapped == truth))


def same_partition(a, b) -> bool:
    """Equal up to renaming of cluster ids (noise must match exactly)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or not np.array_equal(a < 0, b < 0):
        return False
    fwd, back = {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        if x < 0:
            continue
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def load_classification_corpus() -> list[dict]:
    return json.loads((FIXTURES / "classification_corpus.json").read_text(encoding="utf-8"))
