"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (visible with ``pytest -s``) and the lines are repeated in the
terminal summary.
"""

import contextlib
import hashlib
import math
import time

import numpy as np
import pytest

from hazardgraph.analysis import (
    ScoredPair,
    format_comparison_table,
    negative_control_shuffle,
    shannon_entropy,
    summarize_scores,
)
from hazardgraph.classify import Category, parse_classification
from hazardgraph.cluster import HdbscanParams, hdbscan_fit
from hazardgraph.errors import MissingRationale, UnknownCategory, UnparseableResponse
from hazardgraph.gateway import BackendConfig, ModelGateway
from hazardgraph.pipeline import Pipeline, build_config
from hazardgraph.scenegraph import (
    SceneEdge,
    SceneGraph,
    SceneNode,
    attribute_sentence,
    example_graph,
    graph_to_assertions,
    template_prompt,
)
from hazardgraph.scoring import (
    FidStats,
    Weights,
    aggregate_graph_score,
    cosine_similarity,
    fid,
    fid_stats,
    score_assertions,
)

from _support import (
    RUN_ALL_CONFIG,
    SIR_20,
    load_classification_corpus,
    matched_agreement,
    random_graph,
    same_partition,
    two_blob_fixture,
)
from conftest import CRITERIA_LINES


@contextlib.contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException as exc:
        line = f"FAIL criterion {number}: {description} ({type(exc).__name__}: {exc})"
        print(line)
        CRITERIA_LINES.append(line)
        raise
    line = f"PASS criterion {number}: {description}"
    print(line)
    CRITERIA_LINES.append(line)


def hand_graph():
    g = SceneGraph(
        "hand",
        (SceneNode("h", "Ladder", ("tilted", "unsecured"), True), SceneNode("p", "Floor", ("tile",), False)),
        (SceneEdge("h", "p", "on"),),
    )
    return g, {"h/attr0": 0.8, "h/attr1": 0.6, "p/attr0": 1.0, "edge0": 0.5}


def random_scores(g, rng):
    return {a.assertion_id: float(rng.random()) for a in graph_to_assertions(g)}


def test_criterion_1_graph_score_hand_example():
    with criterion(1, "weighted graph score hand example 0.70 and unweighted 0.7333 within 1e-12"):
        t0 = time.perf_counter()
        g, scores = hand_graph()
        weighted = aggregate_graph_score(g, scores, Weights(2.0, 1.5)).s_graph
        flat = aggregate_graph_score(g, scores, Weights(1.0, 1.0)).s_graph
        assert abs(weighted - 0.70) <= 1e-12, weighted
        assert abs(flat - 2.2 / 3.0) <= 1e-12, flat
        assert time.perf_counter() - t0 < 0.5


def test_criterion_2_metric_properties():
    with criterion(2, "1000-trial property suite for graph score, cosine and FID in < 10 s"):
        trials = 1000
        t0 = time.perf_counter()
        rng = np.random.default_rng(20240501)
        for t in range(trials):
            g = random_graph(rng, f"t{t}")
            scores = random_scores(g, rng)
            lam, gam = 1.0 + 4.0 * rng.random(), 1.0 + 4.0 * rng.random()
            base = aggregate_graph_score(g, scores, Weights(lam, gam)).s_graph
            assert 0.0 <= base <= 1.0
            key = sorted(scores)[int(rng.integers(len(scores)))]
            bumped = dict(scores)
            bumped[key] = scores[key] + (1.0 - scores[key]) * rng.random()
            assert aggregate_graph_score(g, bumped, Weights(lam, gam)).s_graph >= base - 1e-15
            b = aggregate_graph_score(g, scores, Weights(1.0, 1.0))
            parts = list(b.node_scores.values()) + list(b.edge_scores.values())
            assert abs(b.s_graph - math.fsum(parts) / len(parts)) <= 1e-12

        for _ in range(trials):
            u, v = rng.standard_normal(32), rng.standard_normal(32)
            a, c = 10.0 ** rng.uniform(-3, 3), 10.0 ** rng.uniform(-3, 3)
            assert abs(cosine_similarity(a * u, c * v) - cosine_similarity(u, v)) <= 1e-12

        for _ in range(trials):
            dim = int(rng.integers(1, 9))
            A = fid_stats(rng.standard_normal((dim + 10, dim)))
            B = fid_stats(rng.standard_normal((dim + 10, dim)) * rng.uniform(0.5, 2.0) + rng.normal())
            assert abs(fid(A, B) - fid(B, A)) <= 1e-8
            assert abs(fid(A, A)) <= 1e-8
            assert fid(A, B) >= 0.0

        for _ in range(trials):
            # 1-D hand formula: (mu1-mu2)^2 + (sigma1-sigma2)^2, planted to equal 1
            # integer means and deviations keep every intermediate exact
            mu, s = float(rng.integers(-5, 6)), int(rng.integers(1, 6))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            one = FidStats(np.array([mu]), np.array([[float(s * s)]]), 10)
            shifted = FidStats(np.array([mu + sign]), np.array([[float(s * s)]]), 10)
            wider = FidStats(np.array([mu]), np.array([[float((s + 1) ** 2)]]), 10)
            assert fid(one, shifted) == 1.0
            assert fid(one, wider) == 1.0
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0, f"{elapsed:.1f} s"


def test_criterion_3_hdbscan_two_blobs():
    with criterion(3, "two-blob HDBSCAN: 2 clusters, >= 90% agreement, noise recall >= 50%, 20/20 permutations"):
        t0 = time.perf_counter()
        params = HdbscanParams(min_cluster_size=30, min_samples=10)
        X, truth = two_blob_fixture(0, dim=8, per_blob=60, sigma=0.05, n_noise=10)
        a = hdbscan_fit(X, params)
        assert a.n_clusters == 2
        assert matched_agreement(a.labels, truth) >= 0.90
        assert np.mean(a.labels[truth == -1] == -1) >= 0.50
        stable = 0
        for seed in range(20):
            perm = np.random.default_rng(seed).permutation(len(X))
            labels = hdbscan_fit(X[perm], params).labels
            back = np.empty_like(labels)
            back[perm] = labels
            stable += same_partition(a.labels, back)
        assert stable == 20, f"{stable}/20"
        assert time.perf_counter() - t0 < 5.0


def test_criterion_4_entropy():
    with criterion(4, "entropy oracles and saturated-vs-spread gap >= 1.5 bits"):
        uniform16 = (np.arange(16) + 0.5) / 16
        assert shannon_entropy(uniform16, 0.0, 1.0, 16) == 4.0
        assert shannon_entropy([0.42] * 100, 0.0, 1.0, 32) == 0.0
        assert abs(shannon_entropy([0.25, 0.25, 0.75, 0.75], 0.0, 1.0, 2) - 1.0) <= 1e-12

        rng = np.random.default_rng(7)
        n = 400
        saturated = np.concatenate([rng.uniform(0.97, 0.999, size=int(0.96 * n)),
                                    rng.uniform(0.0, 1.0, size=n - int(0.96 * n))])
        spread = rng.uniform(0.0, 1.0, size=n)
        counts = np.histogram(saturated, bins=32, range=(0.0, 1.0))[0]
        assert counts.max() / n >= 0.95
        gap = shannon_entropy(spread, 0.0, 1.0, 32) - shannon_entropy(saturated, 0.0, 1.0, 32)
        assert gap >= 1.5, gap


def _beta_oracle(matched_owner):
    """VQA oracle: Beta(8,2) when the assertion belongs to the image's graph, else Beta(2,8)."""

    def oracle(image, text):
        seed = int(hashlib.sha256(f"{image.prompt_digest}|{text}".encode()).hexdigest()[:16], 16)
        rng = np.random.default_rng(seed)
        if matched_owner(image.prompt_digest, text):
            return float(rng.beta(8, 2))
        return float(rng.beta(2, 8))

    return oracle


def test_criterion_5_negative_control():
    with criterion(5, "planted Beta oracle: matched minus shuffled graph score >= 0.3, no fixed points"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        graphs = [random_graph(rng, f"s{i:03d}") for i in range(200)]
        imager = ModelGateway(BackendConfig(mock_profile="grounded"))
        images = [imager.generate_image(template_prompt(g), 0) for g in graphs]
        graph_of_digest = {img.prompt_digest: g.graph_id for g, img in zip(graphs, images)}
        owner_of_text = {a.text: g.graph_id for g in graphs for a in graph_to_assertions(g)}
        judge = ModelGateway(BackendConfig(vqa_oracle=_beta_oracle(
            lambda digest, text: graph_of_digest[digest] == owner_of_text[text])))

        def s_graph(g, image):
            assertions = graph_to_assertions(g)
            return aggregate_graph_score(g, score_assertions(image, assertions, judge)).s_graph

        pairs = list(zip(graphs, images))
        matched = [s_graph(g, img) for g, img in pairs]
        shuffled_pairs = negative_control_shuffle(pairs, "in_domain", seed=11)
        fixed = sum(img is own for (g, own), (_, img) in zip(pairs, shuffled_pairs))
        assert fixed == 0
        shuffled = [s_graph(g, img) for g, img in shuffled_pairs]
        gap = float(np.mean(matched) - np.mean(shuffled))
        assert gap >= 0.3, gap
        assert time.perf_counter() - t0 < 30.0


def test_criterion_6_table_and_run_all(tmp_path):
    with criterion(6, "comparison table formatting on planted inputs and reproducible offline run-all < 60 s"):
        planted = [("hidream", 0.51), ("hidream", 0.53), ("flux", 0.40), ("flux", 0.44), ("flux", 0.42)]
        pairs = [ScoredPair(f"p{i}", f"i{i}", "vqa_graph", v, model_tag=m) for i, (m, v) in enumerate(planted)]
        rows = summarize_scores(pairs)
        assert [r.model_tag for r in rows] == ["hidream", "flux"]
        assert rows[0].formatted("vqa_graph") == "0.52 ± 0.01"
        assert rows[1].formatted("vqa_graph") == "0.42 ± 0.02"
        assert format_comparison_table(rows) == (
            "Model    VQA Graph Score\n"
            "hidream  0.52 ± 0.01\n"
            "flux     0.42 ± 0.02\n"
        )

        t0 = time.perf_counter()
        runs = []
        for name in ("a", "b"):
            cfg = build_config(RUN_ALL_CONFIG, {"workdir": str(tmp_path / name / "work"),
                                                "cache_dir": str(tmp_path / name / "cache")})
            results = Pipeline(cfg).run_all(SIR_20)
            assert all(r.failures == 0 for r in results)
            runs.append({r.artifact.stage: r.artifact for r in results})
        elapsed = time.perf_counter() - t0
        assert elapsed < 60.0, f"{elapsed:.1f} s"
        assert {s: a.content_hash for s, a in runs[0].items()} == {s: a.content_hash for s, a in runs[1].items()}
        assert runs[0]["report"].files == runs[1]["report"].files
        assert {"comparison.json", "entropy.json", "config.json", "scored_pairs.jsonl"} <= set(runs[0]["report"].files)


def test_criterion_7_classification_corpus():
    with criterion(7, "classification parsing corpus 30/30"):
        cases = load_classification_corpus()
        assert len(cases) == 30
        errors = {"UnparseableResponse": UnparseableResponse, "UnknownCategory": UnknownCategory,
                  "MissingRationale": MissingRationale}
        ok = 0
        for case in cases:
            expected = case["expected"]
            try:
                got = parse_classification(case["raw"], 1)
            except tuple(errors.values()) as exc:
                ok += type(exc) is errors.get(expected)
                continue
            ok += got.category is Category(expected) and got.rationale == case["rationale"]
        assert ok == 30, f"{ok}/30"


def test_criterion_8_scene_graph_round_trip():
    with criterion(8, "100 random graphs round-trip with exact assertion counts; example graph templating"):
        rng = np.random.default_rng(8)
        for i in range(100):
            g = random_graph(rng, f"r{i}")
            again = SceneGraph.from_json(g.to_json())
            assert again == g and again.to_dict() == g.to_dict()
            assert len(graph_to_assertions(g)) == sum(len(n.attributes) for n in g.nodes) + len(g.edges)
        ex = example_graph()
        texts = [a.text for a in graph_to_assertions(ex)]
        assert len(texts) == 11
        assert "The spilled water is slippery." in texts
        assert "The warning sign is leaning against the stacked boxes." in texts
        assert attribute_sentence("Platform", "metal") == "The platform is metal."


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
