import json

import pytest
from hypothesis import given, settings

from hazardgraph.errors import (
    EmptyGraph,
    InvalidGraph,
    MultipleHazardNodes,
    NoHazardNode,
    UnparseableGraph,
)
from hazardgraph.gateway import BackendConfig, ModelGateway
from hazardgraph.scenegraph import (
    MAX_PROMPT_WORDS,
    Assertion,
    SceneEdge,
    SceneGraph,
    SceneNode,
    attribute_sentence,
    build_graph_request,
    example_graph,
    expected_assertion_count,
    graph_to_assertions,
    graph_to_prompt,
    parse_scene_graph,
    relation_sentence,
    template_prompt,
)

from _support import scene_graphs

EXAMPLE_ASSERTIONS = [
    "The factory floor is concrete.",
    "The factory floor is wet surface.",
    "The spilled water is clear.",
    "The spilled water is slippery.",
    "The warning sign is not deployed.",
    "The stacked boxes are on wet floor.",
    "The industrial cart is parked near spill.",
    "The spilled water is on the factory floor.",
    "The stacked boxes are next to the spilled water.",
    "The industrial cart is parked near the spilled water.",
    "The warning sign is leaning against the stacked boxes.",
]


def node(i, label, attrs=(), hazard=False):
    return SceneNode(f"n{i}", label, tuple(attrs), hazard)


# -- validation ------------------------------------------------------------


def test_example_graph_is_valid():
    g = example_graph()
    assert g.hazard.label == "Spilled Water"
    assert g.hazard.attributes == ("clear", "slippery")
    assert len(g.nodes) == 5 and len(g.edges) == 4


def test_node_and_edge_invariants():
    with pytest.raises(InvalidGraph):
        SceneNode("n1", "  ", (), False)
    with pytest.raises(InvalidGraph):
        SceneEdge("n1", "n1", "on")
    with pytest.raises(InvalidGraph):
        SceneEdge("n1", "n2", " ")


def test_graph_invariants():
    a, b = node(1, "cord", ["loose"], True), node(2, "floor", ["wet"])
    with pytest.raises(EmptyGraph):
        SceneGraph("g", ())
    with pytest.raises(NoHazardNode):
        SceneGraph("g", (node(1, "a"), node(2, "b")), (SceneEdge("n1", "n2", "on"),))
    with pytest.raises(MultipleHazardNodes):
        SceneGraph("g", (a, node(2, "b", hazard=True)), (SceneEdge("n1", "n2", "on"),))
    with pytest.raises(InvalidGraph):
        SceneGraph("g", (a, b))  # hazard has no edge
    with pytest.raises(InvalidGraph):
        SceneGraph("g", (a, b), (SceneEdge("n1", "n9", "on"),))
    # isolated node allowed only with an attribute
    SceneGraph("g", (a, b, node(3, "sign", ["yellow"])), (SceneEdge("n1", "n2", "on"),))
    with pytest.raises(InvalidGraph):
        SceneGraph("g", (a, b, node(3, "sign")), (SceneEdge("n1", "n2", "on"),))


# -- request / parsing -----------------------------------------------------


def test_graph_request_contents():
    req = build_graph_request("plastic strapping left on workplace floor")
    text = req.system_prompt + req.user_prompt
    assert "plastic strapping left on workplace floor" in text
    for key in ("nodes", "edges", "attributes", "is_hazard"):
        assert f'"{key}"' in text
    for word in ("Spilled Water", "clear", "slippery", "Warning Sign", "not deployed",
                 "Stacked Boxes", "on wet floor", "Industrial Cart", "parked near spill",
                 "Factory Floor", "concrete", "wet surface"):
        assert word in text
    assert req.response_format_hint == "json_object"


def test_parse_example_json():
    raw = "Here you go:\n```json\n" + example_graph().to_json() + "\n```"
    g = parse_scene_graph(raw, "water spilled", "g1", 3)
    assert g.hazard.label == "Spilled Water"
    assert (g.graph_id, g.cluster_id, g.source_rationale) == ("g1", 3, "water spilled")


def test_parse_rejections():
    with pytest.raises(UnparseableGraph):
        parse_scene_graph("no graph here")
    with pytest.raises(EmptyGraph):
        parse_scene_graph('{"nodes": [], "edges": []}')
    two = {"nodes": [{"id": "a", "label": "x", "is_hazard": True},
                     {"id": "b", "label": "y", "is_hazard": True}],
           "edges": [{"source": "a", "target": "b", "relation": "on"}]}
    with pytest.raises(MultipleHazardNodes):
        parse_scene_graph(json.dumps(two))


def test_parse_repairs(caplog):
    raw = {
        "nodes": [
            {"id": "a", "label": "Cord", "attributes": ["loose", "loose", " ", "black"], "is_hazard": "true"},
            {"id": "b", "label": "Floor", "attributes": ["tile"]},
        ],
        "edges": [
            {"source": "Cord", "target": "Floor", "relation": "lying on"},
            {"source": "a", "target": "zz", "relation": "near"},
            {"source": "a", "target": "a", "relation": "touching"},
        ],
    }
    g = parse_scene_graph(json.dumps(raw))
    assert g.node("a").attributes == ("loose", "black")
    assert g.edges == (SceneEdge("a", "b", "lying on"),)
    assert any("dangling" in r.message for r in caplog.records)


def test_mock_backend_graphs_parse():
    gw = ModelGateway(BackendConfig(seed=4))
    raw = gw.chat(build_graph_request("electrical cord stretched across aisle"))
    g = parse_scene_graph(raw, "electrical cord stretched across aisle")
    assert g.hazard.label == "Electrical Cord"


# -- prompts ---------------------------------------------------------------


def test_template_prompt_mentions_every_node():
    text = template_prompt(example_graph())
    for label in ("Spilled Water", "Factory Floor", "Warning Sign", "Stacked Boxes", "Industrial Cart"):
        assert label in text
    assert "slippery" in text


def test_label_only_for_attribute_free_node():
    g = SceneGraph("g", (node(1, "Cord", ["frayed"], True), node(2, "Desk")),
                   (SceneEdge("n1", "n2", "under"),))
    text = template_prompt(g)
    assert "Desk." in text or "Desk;" in text
    assert "Desk (" not in text


def test_prompt_word_limit():
    attrs = [f"attribute{i}" for i in range(80)]
    g = SceneGraph("g", (node(1, "Cord", attrs, True), node(2, "Desk", attrs)),
                   (SceneEdge("n1", "n2", "under"),))
    assert len(template_prompt(g).split()) <= MAX_PROMPT_WORDS

    long_reply = BackendConfig(chat_script=lambda req: "word " * 500)
    assert len(graph_to_prompt(g, ModelGateway(long_reply)).split()) == MAX_PROMPT_WORDS


def test_prompt_via_backend_and_template_fallback():
    g = example_graph()
    assert graph_to_prompt(g) == template_prompt(g)
    reply = BackendConfig(chat_script=lambda req: "  A wet\n floor   scene. ")
    assert graph_to_prompt(g, ModelGateway(reply)) == "A wet floor scene."


# -- assertions ------------------------------------------------------------


def test_example_assertions():
    g = example_graph()
    got = graph_to_assertions(g)
    assert [a.text for a in got] == EXAMPLE_ASSERTIONS
    assert len(got) == expected_assertion_count(g) == 11
    assert got[0].assertion_id == "n1/attr0" and got[0].kind == "attribute"
    assert got[-1].kind == "relation" and got[-1].edge_index == 3


@pytest.mark.parametrize("label, attribute, expected", [
    ("platform", "metal", "The platform is metal."),
    ("Platform", "metal", "The platform is metal."),
    ("the ladder", "is tilted", "The ladder is tilted."),
    ("Boxes", "stacked", "The boxes are stacked."),
    ("Glass", "cracked", "The glass is cracked."),
    ("OSHA Sign", "faded", "The OSHA Sign is faded."),
])
def test_attribute_sentences(label, attribute, expected):
    assert attribute_sentence(label, attribute) == expected


@pytest.mark.parametrize("src, rel, tgt, expected", [
    ("hard hat", "below", "platform edge", "The hard hat is below the platform edge."),
    ("Hard Hat", "is below the", "Platform Edge", "The hard hat is below the platform edge."),
    ("cord", "blocks", "exit", "The cord blocks the exit."),
    ("boxes", "leaning against", "wall", "The boxes are leaning against the wall."),
    ("worker", "walking toward", "a spill", "The worker is walking toward the spill."),
])
def test_relation_sentences(src, rel, tgt, expected):
    assert relation_sentence(src, rel, tgt) == expected


@settings(max_examples=100, deadline=None)
@given(scene_graphs())
def test_round_trip_and_counting(g):
    again = SceneGraph.from_json(g.to_json())
    assert again == g
    assert again.to_dict() == g.to_dict()
    assertions = graph_to_assertions(g)
    assert len(assertions) == sum(len(n.attributes) for n in g.nodes) + len(g.edges)
    assert graph_to_assertions(g) == assertions
    ids = {n.node_id for n in g.nodes}
    for a in assertions:
        if a.kind == "attribute":
            assert a.subject in ids and a.attribute in g.node(a.subject).attributes
        else:
            assert 0 <= a.edge_index < len(g.edges)
        assert Assertion.from_dict(a.to_dict()) == a


def test_schema_keys():
    d = example_graph().to_dict()
    assert set(d) == {"graph_id", "source_rationale", "cluster_id", "nodes", "edges"}
    assert set(d["nodes"][0]) == {"id", "label", "attributes", "is_hazard"}
    assert set(d["edges"][0]) == {"source", "target", "relation"}
