import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narco.errors import EmptyGraph, ValidationError
from narco.graph import NarrativeGraph
from narco.qa import (
    ContextBudget,
    MCQuestion,
    answer_accuracy,
    ask,
    assemble_context,
    assemble_from_ranking,
    parse_option_label,
    qa_request,
    retrieval_query,
    select_nodes,
)
from narco.retrieval import FusionConfig, HashingEmbeddingProvider

import oracles
from conftest import random_graph, scripted_gateway, text_node

MCQ = MCQuestion("Who lit the lamp?", (("A", "Ilse"), ("B", "Corvin"), ("C", "Oskar"), ("D", "nobody")), "A")


def check_assembly(graph, ranked, budget, ctx):
    counts = [len(n.text.split()) for n in graph.nodes]
    if ctx.truncated:
        assert counts[ranked[0]] > budget
        assert ctx.node_ids == (ranked[0],) and ctx.word_count == budget
        return
    assert ctx.word_count <= budget
    assert list(ctx.node_ids) == sorted(ctx.node_ids)
    assert oracles.assembled_ok(ranked, counts, budget, ctx.node_ids)
    assert ctx.text == "\n\n".join(graph.nodes[i].text for i in ctx.node_ids)
    assert ctx.word_count == len(ctx.text.split())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 120))
def test_assembly_properties(seed, n, budget):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    ranked = [int(x) for x in rng.permutation(n)]
    check_assembly(g, ranked, budget, assemble_from_ranking(g, ranked, ContextBudget(budget)))


def test_select_nodes_stops_at_first_misfit():
    # node 1 does not fit, so node 2 is not admitted even though it would
    assert select_nodes([0, 1, 2], [3, 10, 1], 5) == [0]


def test_truncation_when_top_node_is_too_long():
    g = NarrativeGraph((text_node(0, "one two three four five six."), text_node(1, "seven.")))
    ctx = assemble_from_ranking(g, [0, 1], ContextBudget(4))
    assert ctx.truncated and ctx.text == "one two three four" and ctx.node_ids == (0,)


def test_assemble_context_uses_retrieval():
    g = NarrativeGraph(tuple(text_node(i, t) for i, t in enumerate(
        ["The gull flew over the reef.", "Ilse lit the lamp at dusk.", "Bread was baked."])))
    ctx = assemble_context(MCQ, g, HashingEmbeddingProvider(64), FusionConfig(), ContextBudget(8))
    assert ctx.ranking[0] == 1 and 1 in ctx.node_ids
    with pytest.raises(EmptyGraph):
        assemble_context(MCQ, NarrativeGraph(()), HashingEmbeddingProvider(8), FusionConfig(), ContextBudget(5))


def test_retrieval_query_modes():
    assert retrieval_query(MCQ) == MCQ.stem
    assert "Corvin" in retrieval_query(MCQ, include_options=True)


def test_budget_and_question_validation():
    with pytest.raises(ValidationError):
        ContextBudget(0)
    assert ContextBudget.from_tokens(1300).max_words == 1000
    with pytest.raises(ValidationError):
        MCQuestion("q", (("A", "x"),))
    with pytest.raises(ValidationError):
        MCQuestion("q", (("A", "x"), ("A", "y")))
    with pytest.raises(ValidationError):
        MCQuestion("q", (("A", "x"), ("B", "y")), "C")
    d = {"stem": "s", "options": [{"label": "A", "text": "x"}, {"label": "B", "text": "y"}], "gold": "B"}
    assert MCQuestion.from_dict(d).gold_label == "B"


@pytest.mark.parametrize("reply, label", [
    ("(C) Oskar", "C"),
    ("A careful reading gives (C).", "C"),
    ("The answer is B.", "B"),
    ("Answer: **D**", "D"),
    ("B. Corvin did it", "B"),
    ("I would pick D", "D"),
    ("A lamp was lit by Ilse, so B", "B"),
    ("I cannot tell from this excerpt.", None),
    ("", None),
])
def test_parse_option_label(reply, label):
    assert parse_option_label(reply, ["A", "B", "C", "D"]) == label


def test_answer_accuracy_counts_unparsed():
    out = answer_accuracy([(MCQ, "(A)"), (MCQ, "(B)"), (MCQ, "no idea")])
    assert out == {"accuracy": pytest.approx(1 / 3), "unparsed": 1, "n": 3}
    assert answer_accuracy([])["n"] == 0
    with pytest.raises(ValidationError):
        answer_accuracy([(MCQuestion("q", (("A", "x"), ("B", "y"))), "(A)")])


def test_ask_goes_through_the_gateway(tmp_path):
    gw = scripted_gateway(lambda r: "(B)" if "Corvin" in r.messages[-1][1] else "?", tmp_path)
    assert ask([MCQ], ["ctx"], gw) == ["(B)"]
    req = qa_request(MCQ, "ctx")
    assert req.messages[0][0] == "system" and req.messages[1][1].startswith("Excerpt:")
