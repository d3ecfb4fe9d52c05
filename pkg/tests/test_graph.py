import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narco.chunking import Node
from narco.errors import CorruptPayload, ValidationError, VersionMismatch
from narco.graph import (
    FORMAT_VERSION,
    RETAINED,
    Edge,
    NarrativeGraph,
    Question,
    deserialize,
    graph_stats,
    load,
    node_degrees,
    question_type,
    save,
    serialize,
)

from conftest import FIXTURES, random_graph, text_node


def q(i, j, text="What happened?", k=0):
    return Question(text, (i, j), k, RETAINED, (("ev", "prior"),))


def small_graph():
    nodes = tuple(text_node(i, f"Node {i}.") for i in range(3))
    return NarrativeGraph(nodes, (Edge(1, 2, (q(1, 2),), 1), Edge(0, 2, (q(0, 2), q(0, 2, "Why?", 1)), 0),
                                  Edge(0, 1, (), 2)), {"window": 2})


def test_edges_sorted_and_meta_versioned():
    g = small_graph()
    assert [(e.source, e.target) for e in g.edges] == [(0, 1), (0, 2), (1, 2)]
    assert g.build_meta["format_version"] == FORMAT_VERSION


def test_question_directions():
    g = small_graph()
    assert len(g.outgoing_questions(2)) == 3
    assert g.outgoing_questions(0) == []
    assert len(g.incoming_questions(0)) == 2
    assert len(g.neighbor_questions(1)) == 1


def test_invariants_rejected():
    nodes = (text_node(0, "a."), text_node(1, "b."))
    with pytest.raises(ValidationError):
        Edge(1, 1, ())
    with pytest.raises(ValidationError):
        Edge(0, 1, (q(0, 1),), -1)
    with pytest.raises(ValidationError):
        Edge(0, 1, (q(0, 2),))
    with pytest.raises(ValidationError):
        NarrativeGraph(nodes, (Edge(0, 1), Edge(0, 1)))
    with pytest.raises(ValidationError):
        NarrativeGraph(nodes, (Edge(0, 5),))
    with pytest.raises(ValidationError):
        NarrativeGraph((text_node(1, "x."),))
    with pytest.raises(ValidationError):
        Question("x", (0, 1), 0, RETAINED, (("ev", "current"),))
    with pytest.raises(ValidationError):
        Question("x", (2, 1), 0)


def test_serialization_is_sorted_line_json(tmp_path):
    g = small_graph()
    data = serialize(g)
    lines = data.decode().splitlines()
    assert json.loads(lines[0])["section"] == "meta"
    for line in lines:
        assert line == json.dumps(json.loads(line), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    path = tmp_path / "g.narco.jsonl"
    save(g, path)
    assert path.read_bytes() == data
    assert load(path) == g


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_round_trip_random_graphs(seed, n):
    g = random_graph(np.random.default_rng(seed), n)
    again = deserialize(serialize(g))
    assert again == g
    assert serialize(again) == serialize(g)


def test_version_and_corruption_errors():
    good = serialize(small_graph()).decode().splitlines()
    meta = json.loads(good[0])
    meta["meta"]["format_version"] = "narco/0"
    with pytest.raises(VersionMismatch):
        deserialize(("\n".join([json.dumps(meta)] + good[1:])).encode())
    with pytest.raises(CorruptPayload):
        deserialize(b"\xff\xfe")
    with pytest.raises(CorruptPayload):
        deserialize(b"{not json}\n")
    with pytest.raises(CorruptPayload):
        deserialize(("\n".join(good[1:])).encode())
    with pytest.raises(CorruptPayload):
        deserialize(("\n".join(good + ['{"section": "mystery"}'])).encode())
    with pytest.raises(CorruptPayload):
        deserialize(("\n".join(good + ['{"section": "edge", "edge": {"source": 0}}'])).encode())
    with pytest.raises(CorruptPayload):
        deserialize(b"[1, 2]\n")


@pytest.mark.parametrize("text, kind", [
    ("What caused the fire?", "what"),
    ("Why did Nell leave?", "why"),
    ("In what way did the tide matter?", "what"),
    ("Did the letter survive?", "other"),
    ("HOW did it end", "how"),
    ("", "other"),
])
def test_question_type(text, kind):
    assert question_type(text) == kind


def test_stats_fixture():
    g = load(FIXTURES / "stats_19.narco.jsonl")
    s = graph_stats(g)
    assert (s["generated"], s["retained"], s["discarded"]) == (19, 10, 9)
    assert s["filter_rate"] == pytest.approx(9 / 19)
    assert sum(node_degrees(g)) == 2 * s["retained"]
    assert sum(s["question_type_histogram"].values()) == 10


def test_stats_without_generation():
    g = NarrativeGraph((text_node(0, "a."), text_node(1, "b.")), (Edge(0, 1),))
    s = graph_stats(g)
    assert s["filter_rate"] is None and s["mean_node_degree"] == 0.0
    assert graph_stats(NarrativeGraph(()))["mean_node_degree"] == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
def test_degree_sum_identity(seed, n):
    g = random_graph(np.random.default_rng(seed), n)
    s = graph_stats(g)
    assert sum(node_degrees(g)) == 2 * s["retained"]
    assert s["mean_node_degree"] == pytest.approx(2 * s["retained"] / n)
    if s["generated"]:
        assert 0.0 <= s["filter_rate"] <= 1.0
