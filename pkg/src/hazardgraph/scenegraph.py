"""Hazard scene graphs: construction, validation, prompts and assertions.

A graph holds object nodes (with free-text attributes, exactly one flagged
as the hazard) and directed, labelled relation edges. The same graph drives
both the generation prompt and the yes/no assertions used to score the
generated image.
"""

from __future__ import annotations

import json
import logging
import string
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

from ._jsonutil import first_json_object
from .errors import EmptyGraph, InvalidGraph, MultipleHazardNodes, NoHazardNode, UnparseableGraph
from .gateway import ChatRequest, ModelGateway

logger = logging.getLogger(__name__)

SCENE_GRAPH_TEMPERATURE = 0.7
PROMPT_TEMPERATURE = 0.0
MAX_PROMPT_WORDS = 120


@dataclass(frozen=True)
class SceneNode:
    node_id: str
    label: str
    attributes: tuple[str, ...] = ()
    is_hazard: bool = False

    def __post_init__(self):
        if not self.node_id:
            raise InvalidGraph("node id must be non-empty")
        if not self.label or not self.label.strip():
            raise InvalidGraph(f"node {self.node_id!r} has an empty label")
        attrs = tuple(self.attributes)
        if any(not a or not a.strip() for a in attrs):
            raise InvalidGraph(f"node {self.node_id!r} has an empty attribute")
        if len(set(attrs)) != len(attrs):
            raise InvalidGraph(f"node {self.node_id!r} has duplicate attributes")
        object.__setattr__(self, "attributes", attrs)


@dataclass(frozen=True)
class SceneEdge:
    source: str
    target: str
    relation: str

    def __post_init__(self):
        if self.source == self.target:
            raise InvalidGraph(f"self-loop on node {self.source!r}")
        if not self.relation or not self.relation.strip():
            raise InvalidGraph("edge relation must be non-empty")


@dataclass(frozen=True)
class SceneGraph:
    graph_id: str
    nodes: tuple[SceneNode, ...]
    edges: tuple[SceneEdge, ...] = ()
    source_rationale: str = ""
    cluster_id: Optional[int] = None
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        if not self.nodes:
            raise EmptyGraph(f"graph {self.graph_id!r} has no nodes")
        index = {}
        for n in self.nodes:
            if n.node_id in index:
                raise InvalidGraph(f"duplicate node id {n.node_id!r}")
            index[n.node_id] = n
        object.__setattr__(self, "_index", index)
        hazards = [n for n in self.nodes if n.is_hazard]
        if not hazards:
            raise NoHazardNode(f"graph {self.graph_id!r} has no hazard node")
        if len(hazards) > 1:
            raise MultipleHazardNodes(
                f"graph {self.graph_id!r} flags {len(hazards)} hazard nodes"
            )
        for e in self.edges:
            if e.source not in index or e.target not in index:
                raise InvalidGraph(f"edge {e} references a missing node")
        hazard_id = hazards[0].node_id
        if not any(hazard_id in (e.source, e.target) for e in self.edges):
            raise InvalidGraph(f"graph {self.graph_id!r}: no edge touches the hazard node")
        if not self._weakly_connected():
            touched = {e.source for e in self.edges} | {e.target for e in self.edges}
            for n in self.nodes:
                if n.node_id not in touched and not n.attributes:
                    raise InvalidGraph(f"isolated node {n.node_id!r} carries no attribute")

    def _weakly_connected(self) -> bool:
        adj = {n.node_id: set() for n in self.nodes}
        for e in self.edges:
            adj[e.source].add(e.target)
            adj[e.target].add(e.source)
        start = self.nodes[0].node_id
        seen, stack = {start}, [start]
        while stack:
            for nxt in adj[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return len(seen) == len(self.nodes)

    def node(self, node_id: str) -> SceneNode:
        return self._index[node_id]

    @property
    def hazard(self) -> SceneNode:
        return next(n for n in self.nodes if n.is_hazard)

    def incident_to_hazard(self, edge: SceneEdge) -> bool:
        h = self.hazard.node_id
        return edge.source == h or edge.target == h

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "graph_id": self.graph_id,
            "source_rationale": self.source_rationale,
            "cluster_id": self.cluster_id,
            "nodes": [
                {"id": n.node_id, "label": n.label, "attributes": list(n.attributes),
                 "is_hazard": n.is_hazard}
                for n in self.nodes
            ],
            "edges": [
                {"source": e.source, "target": e.target, "relation": e.relation}
                for e in self.edges
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        return cls(
            graph_id=str(d.get("graph_id", "")),
            nodes=tuple(
                SceneNode(str(n["id"]), n["label"], tuple(n.get("attributes", ())),
                          bool(n.get("is_hazard", False)))
                for n in d.get("nodes", ())
            ),
            edges=tuple(SceneEdge(str(e["source"]), str(e["target"]), e["relation"])
                        for e in d.get("edges", ())),
            source_rationale=d.get("source_rationale", ""),
            cluster_id=d.get("cluster_id"),
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneGraph":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# LLM request / response
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _data_text(name: str) -> str:
    return resources.files("hazardgraph.data").joinpath(name).read_text("utf-8")


def example_graph() -> SceneGraph:
    """The slip-hazard worked example embedded in the graph prompt."""
    d = json.loads(_data_text("scenegraph_example.json"))
    d.setdefault("graph_id", "example-slip")
    d.setdefault("source_rationale", "water spilled on floor")
    return SceneGraph.from_dict(d)


def build_graph_request(rationale, temperature: float = SCENE_GRAPH_TEMPERATURE) -> ChatRequest:
    """Contextual-elaboration request for one hazard rationale."""
    text = getattr(rationale, "text", rationale)
    if not text or not str(text).strip():
        raise ValueError("rationale must be non-empty")
    example = json.dumps(json.loads(_data_text("scenegraph_example.json")), indent=1)
    system = string.Template(_data_text("scenegraph_system.txt")).substitute(example=example)
    return ChatRequest(
        user_prompt=f"Hazard rationale: {text}\nReturn the scene graph JSON.",
        system_prompt=system,
        temperature=temperature,
        max_tokens=1200,
        response_format_hint="json_object",
        task="scene_graph",
        metadata={"rationale": str(text)},
    )


def _truthy(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("true", "yes", "1")
    return bool(value)


def parse_scene_graph(
    raw: str,
    rationale_ref: str = "",
    graph_id: str = "",
    cluster_id: Optional[int] = None,
) -> SceneGraph:
    """Extract, repair and validate a graph from a chat response.

    Repairs: blank and duplicate attributes are dropped, edges may name
    nodes by label, dangling or self-loop edges are dropped with a warning.
    Anything else that breaks an invariant is rejected.
    """
    obj = first_json_object(raw)
    if obj is None:
        raise UnparseableGraph("no JSON object in response")
    if "scene_graph" in obj and isinstance(obj["scene_graph"], dict):
        obj = obj["scene_graph"]
    raw_nodes = obj.get("nodes")
    raw_edges = obj.get("edges", [])
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise UnparseableGraph("'nodes' and 'edges' must be lists")
    if not raw_nodes:
        raise EmptyGraph("graph has no nodes")

    nodes = []
    by_label = {}
    for i, rn in enumerate(raw_nodes):
        if not isinstance(rn, dict):
            raise UnparseableGraph(f"node {i} is not an object")
        node_id = str(rn.get("id", rn.get("node_id", f"n{i + 1}")))
        label = rn.get("label", rn.get("name"))
        if not isinstance(label, str) or not label.strip():
            raise UnparseableGraph(f"node {node_id!r} lacks a label")
        attrs = rn.get("attributes", [])
        if isinstance(attrs, str):
            attrs = [attrs]
        clean = []
        for a in attrs if isinstance(attrs, list) else []:
            a = " ".join(str(a).split())
            if a and a not in clean:
                clean.append(a)
        nodes.append(SceneNode(node_id, " ".join(label.split()), tuple(clean),
                               _truthy(rn.get("is_hazard", False))))
        by_label.setdefault(label.strip().lower(), node_id)

    ids = {n.node_id for n in nodes}
    edges = []
    for j, re_ in enumerate(raw_edges):
        if not isinstance(re_, dict):
            raise UnparseableGraph(f"edge {j} is not an object")
        src = str(re_.get("source", re_.get("from", "")))
        tgt = str(re_.get("target", re_.get("to", "")))
        src = src if src in ids else by_label.get(src.strip().lower(), src)
        tgt = tgt if tgt in ids else by_label.get(tgt.strip().lower(), tgt)
        relation = " ".join(str(re_.get("relation", re_.get("label", ""))).split())
        if src not in ids or tgt not in ids:
            logger.warning("dropping dangling edge %s -> %s (%s)", src, tgt, relation)
            continue
        if src == tgt or not relation:
            logger.warning("dropping degenerate edge %s -> %s (%r)", src, tgt, relation)
            continue
        edges.append(SceneEdge(src, tgt, relation))

    return SceneGraph(graph_id, tuple(nodes), tuple(edges), rationale_ref, cluster_id)


# ---------------------------------------------------------------------------
# prompt text
# ---------------------------------------------------------------------------


def truncate_words(text: str, max_words: int = MAX_PROMPT_WORDS) -> str:
    words = text.split()
    return " ".join(words[:max_words])


def template_prompt(g: SceneGraph, max_words: int = MAX_PROMPT_WORDS) -> str:
    """Deterministic prompt: hazard first, then other nodes, then relations."""

    def describe(n: SceneNode) -> str:
        return f"{n.label} ({', '.join(n.attributes)})" if n.attributes else n.label

    hazard = g.hazard
    parts = [f"Photorealistic workplace scene with a hazard: {describe(hazard)}."]
    others = [describe(n) for n in g.nodes if not n.is_hazard]
    if others:
        parts.append("Also visible: " + "; ".join(others) + ".")
    for e in g.edges:
        parts.append(f"{g.node(e.source).label} {e.relation} {g.node(e.target).label}.")
    return truncate_words(" ".join(parts), max_words)


def build_prompt_request(g: SceneGraph, temperature: float = PROMPT_TEMPERATURE) -> ChatRequest:
    graph_json = g.to_json(sort_keys=True)
    system = string.Template(_data_text("prompt_system.txt")).substitute(max_words=MAX_PROMPT_WORDS)
    return ChatRequest(
        user_prompt=f"Scene graph:\n{graph_json}",
        system_prompt=system,
        temperature=temperature,
        max_tokens=300,
        task="prompt",
        metadata={"graph_json": graph_json},
    )


def graph_to_prompt(g: SceneGraph, gateway: Optional[ModelGateway] = None) -> str:
    """Single-paragraph generation prompt for ``g``.

    Without a gateway the template is used. A configured backend that fails
    raises; it never silently falls back.
    """
    if gateway is None:
        return template_prompt(g)
    text = gateway.chat(build_prompt_request(g))
    text = " ".join(text.split())
    if not text:
        raise UnparseableGraph("prompt backend returned empty text")
    return truncate_words(text)


# ---------------------------------------------------------------------------
# assertions
# ---------------------------------------------------------------------------

_ARTICLES = ("the", "a", "an")
_NOT_PLURAL_ENDINGS = ("ss", "us", "is", "as")
_SPATIAL = frozenset(
    "on under near beside behind above below inside over around beneath underneath "
    "across against along atop between in by into onto within outside toward towards".split()
)


@dataclass(frozen=True)
class Assertion:
    assertion_id: str
    text: str
    kind: str  # "attribute" | "relation"
    subject: str  # node id for attributes, "edge:<k>" for relations
    attribute: Optional[str] = None

    @property
    def edge_index(self) -> Optional[int]:
        if self.kind != "relation":
            return None
        return int(self.subject.split(":", 1)[1])

    def to_dict(self) -> dict:
        return {"assertion_id": self.assertion_id, "text": self.text, "kind": self.kind,
                "subject": self.subject, "attribute": self.attribute}

    @classmethod
    def from_dict(cls, d: dict) -> "Assertion":
        return cls(d["assertion_id"], d["text"], d["kind"], d["subject"], d.get("attribute"))


def noun_phrase(label: str) -> str:
    words = label.split()
    if len(words) > 1 and words[0].lower() in _ARTICLES:
        words = words[1:]
    phrase = " ".join(words)
    # title-cased node names read as common nouns inside a sentence
    if phrase.istitle() or phrase.islower():
        phrase = phrase.lower()
    return phrase


def _copula(phrase: str) -> str:
    last = phrase.split()[-1].lower()
    if last.endswith("s") and not last.endswith(_NOT_PLURAL_ENDINGS) and len(last) > 2:
        return "are"
    return "is"


def _strip_copula(text: str) -> str:
    words = text.strip().rstrip(".").split()
    if words and words[0].lower() in ("is", "are"):
        words = words[1:]
    return " ".join(words)


def attribute_sentence(label: str, attribute: str) -> str:
    subject = noun_phrase(label)
    return f"The {subject} {_copula(subject)} {_strip_copula(attribute)}."


def relation_sentence(source_label: str, relation: str, target_label: str) -> str:
    subject = noun_phrase(source_label)
    obj = noun_phrase(target_label)
    rel = _strip_copula(relation)
    words = rel.split()
    while words and words[-1].lower() in _ARTICLES:
        words.pop()
    rel = " ".join(words) or relation.strip()
    single = len(words) == 1 and words[0].lower()
    if single and single not in _SPATIAL and single.endswith("s") and not single.endswith("ss"):
        # finite verb such as "blocks" or "covers"
        return f"The {subject} {rel} the {obj}."
    return f"The {subject} {_copula(subject)} {rel} the {obj}."


def graph_to_assertions(g: SceneGraph) -> list[Assertion]:
    """One assertion per (node, attribute) pair, then one per edge."""
    out = []
    for n in g.nodes:
        for j, attr in enumerate(n.attributes):
            out.append(Assertion(f"{n.node_id}/attr{j}", attribute_sentence(n.label, attr),
                                 "attribute", n.node_id, attr))
    for k, e in enumerate(g.edges):
        out.append(Assertion(
            f"edge{k}",
            relation_sentence(g.node(e.source).label, e.relation, g.node(e.target).label),
            "relation",
            f"edge:{k}",
        ))
    return out


def expected_assertion_count(g: SceneGraph) -> int:
    return sum(len(n.attributes) for n in g.nodes) + len(g.edges)


def graphs_to_jsonl(graphs: Sequence[SceneGraph]) -> str:
    return "".join(g.to_json(sort_keys=True) + "\n" for g in graphs)
