"""Pipeline stages with content-addressed, resumable outputs.

Each stage writes into ``<workdir>/<stage>/`` together with a
``manifest.json`` that records the sha256 of every file, the hashes of the
upstream manifests it consumed, and an input key over the settings it
depends on. A stage whose manifest still matches its inputs and whose files
still verify is reused instead of recomputed. Stages only talk to each
other through these files.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import analysis
from ..classify import ClassificationBatch, HazardRationale, classify_corpus, filter_preventable
from ..cluster import (
    ClusterAssignment,
    assignment_from_jsonl,
    assignment_to_jsonl,
    select_cluster,
    summarize_clusters,
)
from ..cluster.hdbscan import distance_matrix, hdbscan_from_distances
from ..errors import (
    AuthFailure,
    GatewayError,
    GraphError,
    HazardGraphError,
    PartialScores,
    ScoringError,
)
from ..gateway import ImageArtifact, ModelGateway, ResponseCache, digest_text
from ..ingest import read_sir_csv
from ..scenegraph import (
    SceneGraph,
    build_graph_request,
    graph_to_assertions,
    graph_to_prompt,
    parse_scene_graph,
)
from ..scoring import (
    aggregate_graph_score,
    embedding_alignment_score,
    match_head_score,
    score_assertions,
)
from .config import PipelineConfig

logger = logging.getLogger(__name__)

STAGES = ("classify", "cluster", "generate", "score", "report")
MANIFEST = "manifest.json"
POOL_SUFFIXES = (".png", ".jpg", ".jpeg", ".webp", ".bmp")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def _key(obj) -> str:
    return sha256_bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in rows)


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", text).strip("_") or "x"


@dataclass(frozen=True)
class StageArtifact:
    """Manifest of one completed stage."""

    stage: str
    content_hash: str
    path: str
    upstream: dict
    input_key: str
    files: dict
    failures: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, stage_dir: Path) -> Optional["StageArtifact"]:
        path = stage_dir / MANIFEST
        if not path.is_file():
            return None
        try:
            return cls(**json.loads(path.read_text(encoding="utf-8")))
        except (ValueError, TypeError):
            logger.warning("unreadable manifest %s; stage will rerun", path)
            return None

    def verify(self, stage_dir: Path) -> bool:
        """True when every recorded file is present with the recorded hash."""
        for rel, digest in self.files.items():
            p = stage_dir / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return _key(self.files) == self.content_hash


@dataclass
class StageResult:
    artifact: StageArtifact
    reused: bool
    directory: Path

    @property
    def failures(self) -> int:
        return self.artifact.failures


@dataclass
class Pipeline:
    """Stage runner bound to one configuration and working directory."""

    cfg: PipelineConfig
    force: bool = False
    environ: Optional[dict] = None
    _gateways: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        # credentials are checked before any stage does work
        self.cfg.validate_backends(self.environ)
        self.workdir = Path(self.cfg.workdir)
        self.cache = ResponseCache(self.cfg.cache_dir)

    # -- plumbing -----------------------------------------------------------

    def gateway(self, name: str) -> ModelGateway:
        if name not in self._gateways:
            self._gateways[name] = ModelGateway(self.cfg.backend(name, self.environ), cache=self.cache)
        return self._gateways[name]

    def capability(self, cap: str) -> ModelGateway:
        return self.gateway(self.cfg.backends[cap])

    def _tag(self, name: str) -> str:
        return self.cfg.backend(name, self.environ).tag

    def stage_dir(self, stage: str) -> Path:
        return self.workdir / stage

    def artifact(self, stage: str) -> StageArtifact:
        art = StageArtifact.load(self.stage_dir(stage))
        if art is None or not art.verify(self.stage_dir(stage)):
            raise HazardGraphError(f"stage {stage!r} has no valid output in {self.workdir}; run it first")
        return art

    def _run(self, stage: str, inputs: dict, upstream: dict,
             produce: Callable[[Path], int]) -> StageResult:
        final = self.stage_dir(stage)
        input_key = _key({"stage": stage, "inputs": inputs, "upstream": upstream})
        existing = StageArtifact.load(final)
        if (not self.force and existing is not None and existing.input_key == input_key
                and existing.verify(final)):
            logger.info("%s: reusing %s", stage, existing.content_hash[:12])
            return StageResult(existing, True, final)

        tmp = self.workdir / f".{stage}.partial"
        shutil.rmtree(tmp, ignore_errors=True)
        tmp.mkdir(parents=True)
        failures = int(produce(tmp))
        files = {
            p.relative_to(tmp).as_posix(): sha256_file(p)
            for p in sorted(tmp.rglob("*")) if p.is_file()
        }
        art = StageArtifact(stage, _key(files), stage, upstream, input_key, files, failures)
        (tmp / MANIFEST).write_text(canonical_json(art.to_dict()), encoding="utf-8")
        shutil.rmtree(final, ignore_errors=True)
        tmp.rename(final)
        logger.info("%s: wrote %s (%d failures)", stage, art.content_hash[:12], failures)
        return StageResult(art, False, final)

    def _map(self, fn, items):
        with ThreadPoolExecutor(max_workers=self.cfg.max_in_flight) as pool:
            return list(pool.map(fn, items))

    # -- classify -----------------------------------------------------------

    def classify(self, csv_path, strict: bool = False) -> StageResult:
        csv_path = Path(csv_path)
        if not csv_path.is_file():
            raise FileNotFoundError(csv_path)
        inputs = {"csv": sha256_file(csv_path), "strict": strict,
                  "chat": self._tag(self.cfg.backends["chat"])}

        def produce(out: Path) -> int:
            corpus = read_sir_csv(csv_path, strict=strict)
            batch = classify_corpus(corpus, self.capability("chat"))
            (out / "batch.jsonl").write_text(batch.to_jsonl(), encoding="utf-8")
            summary = {
                "records": len(corpus),
                "skipped": len(corpus.skipped),
                "counts": batch.counts_summary(),
                "flagged": {
                    flag: sum(flag in c.flags for c in batch.items)
                    for flag in ("backend_error", "parse_failure")
                },
            }
            (out / "counts.json").write_text(canonical_json(summary), encoding="utf-8")
            (out / "skipped.tsv").write_text(corpus.skipped_report(), encoding="utf-8")
            return summary["flagged"]["backend_error"]

        return self._run("classify", inputs, {}, produce)

    # -- cluster ------------------------------------------------------------

    def _load_batch(self) -> ClassificationBatch:
        text = (self.stage_dir("classify") / "batch.jsonl").read_text(encoding="utf-8")
        return ClassificationBatch.from_jsonl(text)

    def cluster(self, embeddings_path=None) -> StageResult:
        upstream = {}
        inputs = {
            "params": asdict(self.cfg.hdbscan_params),
            "allow_single_cluster": self.cfg.allow_single_cluster,
        }
        if embeddings_path is not None:
            embeddings_path = Path(embeddings_path)
            inputs["embeddings"] = sha256_file(embeddings_path)
            if StageArtifact.load(self.stage_dir("classify")) is not None:
                upstream["classify"] = self.artifact("classify").content_hash
        else:
            upstream["classify"] = self.artifact("classify").content_hash
            inputs["embed"] = self._tag(self.cfg.backends["embed"])

        def produce(out: Path) -> int:
            rationales = filter_preventable(self._load_batch()) if "classify" in upstream else []
            if embeddings_path is not None:
                V = load_embeddings(embeddings_path)
                if len(rationales) != V.shape[0]:
                    rationales = [HazardRationale(f"item {i}", i) for i in range(V.shape[0])]
            elif rationales:
                vecs = self.capability("embed").embed([r.text for r in rationales])
                V = np.vstack([v.values for v in vecs])
                norms = np.linalg.norm(V, axis=1, keepdims=True)
                V = V / np.where(norms == 0.0, 1.0, norms)
            else:
                V = np.empty((0, 0))
            write_cluster_outputs(out, V, rationales, self.cfg)
            return 0

        return self._run("cluster", inputs, upstream, produce)

    # -- generate -----------------------------------------------------------

    def _load_assignment(self) -> tuple[ClusterAssignment, list[HazardRationale], dict]:
        d = self.stage_dir("cluster")
        summary = json.loads((d / "summary.json").read_text(encoding="utf-8"))
        assignment, refs = assignment_from_jsonl(
            (d / "assignment.jsonl").read_text(encoding="utf-8"), summary["stabilities"]
        )
        return assignment, refs, summary

    def generate(self, cluster_id: Optional[int] = None) -> StageResult:
        cluster_id = self.cfg.cluster_id if cluster_id is None else cluster_id
        upstream = {"cluster": self.artifact("cluster").content_hash}
        inputs = {
            "cluster_id": cluster_id,
            "max_scenes": self.cfg.max_scenes,
            "chat": self._tag(self.cfg.backends["chat"]),
            "llm_prompts": self.cfg.llm_prompts,
            "generators": {g: self._tag(g) for g in self.cfg.generators},
            "seed": self.cfg.seed,
            "image_size": list(self.cfg.image_size),
        }

        def produce(out: Path) -> int:
            assignment, refs, summary = self._load_assignment()
            chosen, cid = self._choose_rationales(assignment, refs, summary, cluster_id)
            results = self._map(lambda r: self._generate_one(r, cid, out), chosen)
            graphs, prompts, images, rejections = [], [], [], []
            for g, prompt, imgs, rejects in results:
                if g is not None:
                    graphs.append(g.to_dict())
                if prompt is not None:
                    prompts.append({"graph_id": g.graph_id, "prompt": prompt,
                                    "prompt_digest": digest_text(prompt)})
                images.extend(imgs)
                rejections.extend(rejects)
            (out / "graphs.jsonl").write_text(_jsonl(graphs), encoding="utf-8")
            (out / "prompts.jsonl").write_text(_jsonl(prompts), encoding="utf-8")
            (out / "images.jsonl").write_text(_jsonl(images), encoding="utf-8")
            (out / "rejections.jsonl").write_text(_jsonl(rejections), encoding="utf-8")
            (out / "selection.json").write_text(canonical_json(
                {"cluster_id": cid, "rationales": [r.record_id for r in chosen]}), encoding="utf-8")
            return len(rejections)

        return self._run("generate", inputs, upstream, produce)

    def _choose_rationales(self, assignment, refs, summary, cluster_id):
        if cluster_id is not None:
            chosen, cid = select_cluster(assignment, int(cluster_id), refs), int(cluster_id)
        elif summary["clusters"]:
            cid = int(summary["clusters"][0]["ID"])  # largest
            chosen = select_cluster(assignment, cid, refs)
        else:
            logger.warning("no clusters found; generating from every preventable rationale")
            chosen, cid = list(refs), None
        chosen = sorted(chosen, key=lambda r: r.record_id)
        if self.cfg.max_scenes is not None:
            chosen = chosen[: self.cfg.max_scenes]
        return chosen, cid

    def _generate_one(self, rationale: HazardRationale, cid, out: Path):
        graph_id = f"g{rationale.record_id:05d}"
        chat = self.capability("chat")
        reject = {"graph_id": graph_id, "rationale_ref": rationale.record_id}
        g, error = None, None
        for variant in (0, 1):  # one retry on an invalid graph
            try:
                raw = chat.chat(build_graph_request(rationale), variant=variant)
                g = parse_scene_graph(raw, rationale.text, graph_id, cid)
                break
            except AuthFailure:
                raise
            except (GraphError, GatewayError, ValueError) as exc:
                error = exc
        if g is None:
            return None, None, [], [{**reject, "stage": "scene_graph", "error": type(error).__name__,
                                     "detail": str(error)}]
        try:
            prompt = graph_to_prompt(g, chat if self.cfg.llm_prompts else None)
        except AuthFailure:
            raise
        except (GraphError, GatewayError) as exc:
            return g, None, [], [{**reject, "stage": "prompt", "error": type(exc).__name__,
                                  "detail": str(exc)}]
        images, rejects = [], []
        for gen in self.cfg.generators:
            try:
                img = self.gateway(gen).generate_image(prompt, self.cfg.seed)
            except AuthFailure:
                raise
            except GatewayError as exc:
                rejects.append({**reject, "stage": "image", "model_tag": gen,
                                "error": type(exc).__name__, "detail": str(exc)})
                continue
            rel = Path("images") / _slug(gen) / f"{graph_id}.png"
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            (out / rel).write_bytes(img.image_bytes)
            images.append({"graph_id": graph_id, "model_tag": gen, "path": rel.as_posix(),
                           "sha256": img.content_hash, "prompt_digest": img.prompt_digest})
        return g, prompt, images, rejects

    # -- score --------------------------------------------------------------

    def _load_generation(self):
        d = self.stage_dir("generate")
        graphs = {row["graph_id"]: SceneGraph.from_dict(row) for row in _read_jsonl(d / "graphs.jsonl")}
        prompts = {row["graph_id"]: row["prompt"] for row in _read_jsonl(d / "prompts.jsonl")}
        images = sorted(_read_jsonl(d / "images.jsonl"), key=lambda r: (r["model_tag"], r["graph_id"]))
        return d, graphs, prompts, images

    def evaluate(self, g: SceneGraph, prompt: str, image: ImageArtifact) -> dict:
        """All three metrics for one prompt/image pairing."""
        vqa = self.capability("vqa")
        assertions = graph_to_assertions(g)
        scores = score_assertions(image, assertions, vqa)
        breakdown = aggregate_graph_score(g, scores, self.cfg.weights, assertions)
        return {
            "vqa_graph": breakdown.s_graph,
            "clip_style": embedding_alignment_score(prompt, image, vqa),
            "blip_style": match_head_score(prompt, image, vqa),
            "breakdown": breakdown.to_dict(),
        }

    def _safe_evaluate(self, g, prompt, image):
        try:
            return self.evaluate(g, prompt, image), None
        except AuthFailure:
            raise
        except PartialScores as exc:
            return None, {"error": "PartialScores", "detail": sorted(exc.failures)}
        except (GatewayError, ScoringError, ValueError) as exc:
            return None, {"error": type(exc).__name__, "detail": str(exc)}

    def score(self) -> StageResult:
        upstream = {"generate": self.artifact("generate").content_hash}
        inputs = {"vqa": self._tag(self.cfg.backends["vqa"]), "weights": self.cfg.weights.to_dict()}

        def produce(out: Path) -> int:
            gen_dir, graphs, prompts, images = self._load_generation()

            def one(row):
                ref = {"graph_id": row["graph_id"], "model_tag": row["model_tag"]}
                path = gen_dir / row["path"]
                if not path.is_file():
                    return ref, None, {"error": "MissingImage", "detail": row["path"]}
                image = ImageArtifact.from_png(path.read_bytes(), row["model_tag"], row["prompt_digest"])
                g = graphs[row["graph_id"]]
                result, err = self._safe_evaluate(g, prompts[row["graph_id"]], image)
                return ref, result, err

            pairs, breakdowns, errors = [], [], []
            for ref, result, err in self._map(one, images):
                if err is not None:
                    errors.append({**ref, **err})
                    continue
                breakdowns.append({**ref, **result["breakdown"]})
                for metric in analysis.METRICS:
                    pairs.append(analysis.ScoredPair(ref["graph_id"], f"{ref['model_tag']}/{ref['graph_id']}",
                                                     metric, result[metric], "matched", ref["model_tag"]))
            (out / "scored_pairs.jsonl").write_text(analysis.scored_pairs_to_jsonl(pairs), encoding="utf-8")
            (out / "breakdowns.jsonl").write_text(_jsonl(breakdowns), encoding="utf-8")
            (out / "errors.jsonl").write_text(_jsonl(errors), encoding="utf-8")
            return len(errors)

        return self._run("score", inputs, upstream, produce)

    # -- analyze ------------------------------------------------------------

    def _pool(self) -> list[tuple[str, ImageArtifact]]:
        if not self.cfg.image_pool:
            return []
        root = Path(self.cfg.image_pool)
        if not root.is_dir():
            return []
        out = []
        for p in sorted(root.iterdir()):
            if p.suffix.lower() in POOL_SUFFIXES and p.is_file():
                out.append((p.name, load_pool_image(p)))
        return out

    def analyze(self) -> StageResult:
        upstream = {
            "generate": self.artifact("generate").content_hash,
            "score": self.artifact("score").content_hash,
        }
        pool = self._pool() if "out_of_domain" in self.cfg.shuffles else []
        inputs = {
            "config": self.cfg.snapshot(),
            "vqa": self._tag(self.cfg.backends["vqa"]),
            "pool": [(name, img.content_hash) for name, img in pool],
        }

        def produce(out: Path) -> int:
            gen_dir, graphs, prompts, images = self._load_generation()
            matched = analysis.scored_pairs_from_jsonl(
                (self.stage_dir("score") / "scored_pairs.jsonl").read_text(encoding="utf-8"))
            scored = {(p.model_tag, p.prompt_ref) for p in matched}
            shuffled, errors = [], []
            for gen in self.cfg.generators:
                rows = [r for r in images if r["model_tag"] == gen and (gen, r["graph_id"]) in scored]
                pairs = [(r["graph_id"], r) for r in rows]
                for mode in self.cfg.shuffles:
                    if mode == "in_domain" and len(pairs) < 2:
                        logger.warning("%s: fewer than 2 scored images; skipping in-domain shuffle", gen)
                        continue
                    mixed = analysis.negative_control_shuffle(
                        pairs, mode, self.cfg.seed, pool=pool if mode == "out_of_domain" else None)
                    condition = f"shuffled_{mode}"
                    jobs = []
                    for graph_id, other in mixed:
                        if mode == "in_domain":
                            img = ImageArtifact.from_png((gen_dir / other["path"]).read_bytes(),
                                                         gen, other["prompt_digest"])
                            ref = f"{gen}/{other['graph_id']}"
                        else:
                            ref, img = f"pool/{other[0]}", other[1]
                        jobs.append((graph_id, ref, img))

                    def one(job):
                        graph_id, ref, img = job
                        return job, *self._safe_evaluate(graphs[graph_id], prompts[graph_id], img)

                    for (graph_id, ref, _), result, err in self._map(one, jobs):
                        if err is not None:
                            errors.append({"graph_id": graph_id, "image_ref": ref, "model_tag": gen,
                                           "condition": condition, **err})
                            continue
                        for metric in analysis.METRICS:
                            shuffled.append(analysis.ScoredPair(graph_id, ref, metric, result[metric],
                                                                condition, gen))
            write_report(out, matched, shuffled, self.cfg)
            (out / "errors.jsonl").write_text(_jsonl(errors), encoding="utf-8")
            return len(errors)

        return self._run("report", inputs, upstream, produce)

    # -- all ------------------------------------------------------------------

    def run_all(self, csv_path, strict: bool = False) -> list[StageResult]:
        return [
            self.classify(csv_path, strict=strict),
            self.cluster(),
            self.generate(),
            self.score(),
            self.analyze(),
        ]


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------


def load_embeddings(path) -> np.ndarray:
    """Read an N x m matrix from ``.npy`` or JSON (list of rows or ``{"vectors": ...}``)."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        V = np.load(path, allow_pickle=False)
    else:
        data = json.loads(path.read_text(encoding="utf-8"))
        V = np.asarray(data["vectors"] if isinstance(data, dict) else data, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or not np.all(np.isfinite(V)):
        raise HazardGraphError(f"{path}: expected a finite 2-D embedding matrix")
    return V


def write_cluster_outputs(out: Path, V: np.ndarray, rationales, cfg: PipelineConfig) -> ClusterAssignment:
    n = V.shape[0]
    if n == 0:
        logger.warning("no preventable rationales to cluster")
        assignment = ClusterAssignment(np.empty(0, dtype=np.int64), np.empty(0), {})
        summaries = []
    else:
        D = distance_matrix(V, cfg.cluster_metric)
        assignment = hdbscan_from_distances(D, cfg.hdbscan_params, cfg.allow_single_cluster)[0]
        summaries = summarize_clusters(assignment, V, rationales, metric=cfg.cluster_metric)
    summary = {
        "params": asdict(cfg.hdbscan_params),
        "allow_single_cluster": cfg.allow_single_cluster,
        "n_points": int(n),
        "n_clusters": len(summaries),
        "n_noise": int(np.sum(assignment.labels < 0)),
        "stabilities": {str(k): float(v) for k, v in sorted(assignment.stabilities.items())},
        "clusters": [s.to_table_row() for s in summaries],
    }
    (out / "summary.json").write_text(canonical_json(summary), encoding="utf-8")
    (out / "assignment.jsonl").write_text(assignment_to_jsonl(assignment, rationales), encoding="utf-8")
    buf = io.BytesIO()
    np.save(buf, V, allow_pickle=False)
    (out / "embeddings.npy").write_bytes(buf.getvalue())
    return assignment


def load_pool_image(path: Path) -> ImageArtifact:
    """Load any common raster as a PNG-backed artifact."""
    from PIL import Image

    data = path.read_bytes()
    if path.suffix.lower() != ".png":
        with Image.open(io.BytesIO(data)) as im:
            buf = io.BytesIO()
            im.convert("RGB").save(buf, format="PNG")
            data = buf.getvalue()
    return ImageArtifact.from_png(data, "pool", digest_text(path.name))


def write_report(out: Path, matched, shuffled, cfg: PipelineConfig) -> None:
    """``comparison.json``, ``entropy.json``, ``dist/`` and the config snapshot."""
    everything = list(matched) + list(shuffled)
    binning = cfg.binning
    comparison = {"rows": [], "table": "", "negative_controls": []}
    if matched:
        rows = analysis.summarize_scores(matched)
        comparison["rows"] = [r.to_dict() for r in rows]
        comparison["table"] = analysis.format_comparison_table(rows)
    if everything:
        by_condition = [
            analysis.ScoredPair(p.prompt_ref, p.image_ref, p.metric, p.value, p.condition, p.condition)
            for p in everything
        ]
        comparison["negative_controls"] = [r.to_dict() for r in analysis.summarize_scores(by_condition)]
    entropy = {
        "binning": {"bins": binning.bins,
                    "ranges": {m: list(binning.range_for(m)) for m in analysis.METRICS}},
        "reports": [r.to_dict() for r in analysis.entropy_table(everything, binning)] if everything else [],
    }
    (out / "comparison.json").write_text(canonical_json(comparison), encoding="utf-8")
    (out / "entropy.json").write_text(canonical_json(entropy), encoding="utf-8")
    (out / "config.json").write_text(canonical_json(cfg.snapshot()), encoding="utf-8")
    (out / "scored_pairs.jsonl").write_text(analysis.scored_pairs_to_jsonl(everything), encoding="utf-8")
    if everything:
        analysis.export_distributions(everything, out / "dist", binning)
