"""HDBSCAN* on a dense distance matrix.

Steps: core distances at ``min_samples`` (the point itself counts as its
first neighbour), mutual reachability distances, a minimum spanning tree by
Prim's algorithm, the single-linkage hierarchy from the sorted MST edges,
condensation at ``min_cluster_size``, and excess-of-mass selection.

Memory is O(N^2) for the distance matrix, which is fine up to roughly 50k
points. Ties are broken by lowest point index throughout, so a run is a
deterministic function of the input order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.metrics import pairwise_distances
from sklearn.utils.validation import check_array, check_is_fitted

from ..errors import TooFewPoints

logger = logging.getLogger(__name__)

METRICS = ("euclidean", "cosine_distance")

# relative floor applied to zero distances so that 1/d stays finite
_ZERO_DISTANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class HdbscanParams:
    min_cluster_size: int = 30
    min_samples: int = 10
    metric: str = "euclidean"

    def __post_init__(self):
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if self.min_samples > self.min_cluster_size:
            raise ValueError("min_samples must not exceed min_cluster_size")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray
    probabilities: np.ndarray
    stabilities: dict

    @property
    def n_clusters(self) -> int:
        return len(self.stabilities)

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster_id)

    def sizes(self) -> dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in sorted(self.stabilities)}


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def distance_matrix(X: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    if metric == "euclidean":
        D = pairwise_distances(X, metric="euclidean")
    elif metric == "cosine_distance":
        D = np.clip(pairwise_distances(X, metric="cosine"), 0.0, 2.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def core_distances(D: np.ndarray, min_samples: int) -> np.ndarray:
    """Distance to the ``min_samples``-th nearest point, self included."""
    k = min(min_samples, D.shape[0]) - 1
    return np.partition(D, k, axis=1)[:, k]


def mutual_reachability(D: np.ndarray, core: np.ndarray) -> np.ndarray:
    M = np.maximum(D, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(M, 0.0)
    return M


def prim_mst(M: np.ndarray) -> np.ndarray:
    """MST edges ``(u, v, w)`` of a dense symmetric matrix, in insertion order."""
    n = M.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    edges = np.empty((max(n - 1, 0), 3))
    current = 0
    in_tree[0] = True
    for i in range(n - 1):
        row = M[current]
        better = (~in_tree) & (row < best)
        best[better] = row[better]
        parent[better] = current
        masked = np.where(in_tree, np.inf, best)
        nxt = int(np.argmin(masked))  # first minimum -> lowest index
        edges[i] = (parent[nxt], nxt, best[nxt])
        in_tree[nxt] = True
        current = nxt
    return edges


def single_linkage(mst: np.ndarray, n: int) -> np.ndarray:
    """Linkage rows ``(left, right, distance, size)``; merge i creates node n+i."""
    lo = np.minimum(mst[:, 0], mst[:, 1])
    hi = np.maximum(mst[:, 0], mst[:, 1])
    order = np.lexsort((hi, lo, mst[:, 2]))
    parent = np.arange(2 * n - 1)
    size = np.concatenate([np.ones(n, dtype=np.int64), np.zeros(n - 1, dtype=np.int64)])

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    out = np.empty((n - 1, 4))
    for i, e in enumerate(order):
        a, b = find(int(mst[e, 0])), find(int(mst[e, 1]))
        new = n + i
        parent[a] = parent[b] = new
        size[new] = size[a] + size[b]
        out[i] = (min(a, b), max(a, b), mst[e, 2], size[new])
    return out


# ---------------------------------------------------------------------------
# condensed tree and selection
# ---------------------------------------------------------------------------


def _descendants(linkage: np.ndarray, node: int, n: int) -> list[int]:
    out, stack = [], [node]
    while stack:
        x = stack.pop()
        out.append(x)
        if x >= n:
            left, right = linkage[x - n, :2].astype(np.int64)
            stack.extend((int(right), int(left)))
    return out


def condense_tree(linkage: np.ndarray, n: int, min_cluster_size: int, floor: float) -> np.ndarray:
    """Rows ``(parent, child, lambda, child_size)``; clusters are labelled from n."""
    root = 2 * n - 2
    sizes = np.concatenate([np.ones(n), linkage[:, 3]])
    relabel = {root: n}
    next_label = n + 1
    ignore = np.zeros(2 * n - 1, dtype=bool)
    rows = []

    queue = [root]
    head = 0
    while head < len(queue):
        node = queue[head]
        head += 1
        if node < n or ignore[node]:
            continue
        left, right, dist, _ = linkage[node - n]
        left, right = int(left), int(right)
        queue.extend((left, right))
        lam = 1.0 / max(dist, floor)
        lsize, rsize = sizes[left], sizes[right]
        me = relabel[node]

        if lsize >= min_cluster_size and rsize >= min_cluster_size:
            for child, csize in ((left, lsize), (right, rsize)):
                relabel[child] = next_label
                rows.append((me, next_label, lam, csize))
                next_label += 1
        else:
            for child, csize in ((left, lsize), (right, rsize)):
                if csize >= min_cluster_size:
                    relabel[child] = me  # cluster continues under the same label
                    continue
                for sub in _descendants(linkage, child, n):
                    if sub < n:
                        rows.append((me, sub, lam, 1))
                    ignore[sub] = True
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def compute_stability(tree: np.ndarray, n: int) -> dict[int, float]:
    parents = tree[:, 0].astype(np.int64)
    children = tree[:, 1].astype(np.int64)
    births = {n: 0.0}
    for c, lam in zip(children, tree[:, 2]):
        if c >= n:
            births[int(c)] = float(lam)
    stability = {c: 0.0 for c in births}
    for p, lam, csize in zip(parents, tree[:, 2], tree[:, 3]):
        stability[int(p)] += (float(lam) - births[int(p)]) * float(csize)
    return stability


def select_clusters_eom(tree: np.ndarray, n: int, allow_single_cluster: bool = False) -> list[int]:
    stability = compute_stability(tree, n)
    children_of: dict[int, list[int]] = {c: [] for c in stability}
    for p, c in zip(tree[:, 0].astype(np.int64), tree[:, 1].astype(np.int64)):
        if c >= n:
            children_of[int(p)].append(int(c))

    def cluster_descendants(c):
        out, stack = [], list(children_of[c])
        while stack:
            x = stack.pop()
            out.append(x)
            stack.extend(children_of[x])
        return out

    nodes = sorted(stability, reverse=True)
    if not allow_single_cluster:
        nodes = [c for c in nodes if c != n]
    is_cluster = {c: True for c in nodes}
    for node in nodes:
        subtree = sum(stability[c] for c in children_of[node])
        if subtree > stability[node]:
            is_cluster[node] = False
            stability[node] = subtree
        else:
            for d in cluster_descendants(node):
                is_cluster[d] = False
    return sorted(c for c, keep in is_cluster.items() if keep)


def label_points(tree: np.ndarray, n: int, selected: list[int]):
    parents = tree[:, 0].astype(np.int64)
    children = tree[:, 1].astype(np.int64)
    lambdas = tree[:, 2]
    up = {int(c): int(p) for p, c in zip(parents, children) if c >= n}
    label_of = {c: i for i, c in enumerate(selected)}

    def owner(cluster):
        while cluster not in label_of:
            if cluster not in up:
                return None
            cluster = up[cluster]
        return cluster

    # highest lambda among direct children of each cluster
    death = {}
    for p, lam in zip(parents, lambdas):
        death[int(p)] = max(death.get(int(p), 0.0), float(lam))

    labels = np.full(n, -1, dtype=np.int64)
    probs = np.zeros(n)
    for p, c, lam in zip(parents, children, lambdas):
        if c >= n:
            continue
        home = owner(int(p))
        if home is None:
            continue
        labels[c] = label_of[home]
        max_lam = death[home]
        probs[c] = min(lam, max_lam) / max_lam if max_lam > 0 else 1.0
    return labels, probs


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def hdbscan_from_distances(D: np.ndarray, params: HdbscanParams,
                           allow_single_cluster: bool = False):
    """Run the pipeline on a precomputed distance matrix.

    Returns ``(assignment, condensed_tree, linkage)``.
    """
    n = D.shape[0]
    if n == 0:
        raise TooFewPoints("no points to cluster")
    empty_tree = np.empty((0, 4))
    if n < params.min_cluster_size:
        logger.warning("%d points < min_cluster_size=%d: everything is noise",
                       n, params.min_cluster_size)
        return _all_noise(n), empty_tree, np.empty((0, 4))
    max_d = float(D.max())
    if max_d == 0.0:
        # every point coincides: one cluster, since n >= min_cluster_size
        assignment = ClusterAssignment(np.zeros(n, dtype=np.int64), np.ones(n), {0: 0.0})
        return assignment, empty_tree, np.empty((0, 4))

    core = core_distances(D, params.min_samples)
    M = mutual_reachability(D, core)
    mst = prim_mst(M)
    linkage = single_linkage(mst, n)
    tree = condense_tree(linkage, n, params.min_cluster_size, _ZERO_DISTANCE_FLOOR * max_d)
    selected = select_clusters_eom(tree, n, allow_single_cluster)
    labels, probs = label_points(tree, n, selected)
    stab = compute_stability(tree, n)
    stabilities = {i: float(stab[c]) for i, c in enumerate(selected)}
    return ClusterAssignment(labels, probs, stabilities), tree, linkage


def _all_noise(n: int) -> ClusterAssignment:
    return ClusterAssignment(np.full(n, -1, dtype=np.int64), np.zeros(n), {})


def hdbscan_fit(Z, params: HdbscanParams = HdbscanParams()) -> ClusterAssignment:
    """Cluster the rows of ``Z`` (an array or an ``EmbeddingSet``)."""
    X = getattr(Z, "vectors", Z)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise TooFewPoints("expected a non-empty 2-D array")
    X = check_array(X, dtype=np.float64)
    D = distance_matrix(X, params.metric)
    return hdbscan_from_distances(D, params)[0]


class HDBSCAN(ClusterMixin, BaseEstimator):
    """Estimator wrapper exposing the usual ``fit`` / ``fit_predict`` API.

    Attributes set by ``fit``: ``labels_``, ``probabilities_``,
    ``cluster_persistence_`` (stability per label), ``condensed_tree_``
    and ``single_linkage_tree_``.
    """

    def __init__(self, min_cluster_size: int = 30, min_samples: Optional[int] = 10,
                 metric: str = "euclidean", allow_single_cluster: bool = False):
        self.min_cluster_size = min_cluster_size
        self.min_samples = min_samples
        self.metric = metric
        self.allow_single_cluster = allow_single_cluster

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        params = HdbscanParams(
            self.min_cluster_size,
            self.min_cluster_size if self.min_samples is None else self.min_samples,
            self.metric,
        )
        D = distance_matrix(X, params.metric)
        assignment, tree, linkage = hdbscan_from_distances(D, params, self.allow_single_cluster)
        self.n_features_in_ = X.shape[1]
        self.labels_ = assignment.labels
        self.probabilities_ = assignment.probabilities
        self.cluster_persistence_ = np.array(
            [assignment.stabilities[k] for k in sorted(assignment.stabilities)]
        )
        self.condensed_tree_ = tree
        self.single_linkage_tree_ = linkage
        self.assignment_ = assignment
        return self

    @property
    def n_clusters_(self) -> int:
        check_is_fitted(self, "labels_")
        return self.assignment_.n_clusters
