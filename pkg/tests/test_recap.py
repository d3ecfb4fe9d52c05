import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narco.errors import MalformedResponse, ValidationError
from narco.graph import RETAINED, Edge, Question
from narco.recap import (
    RecapConfig,
    RecapInstance,
    RelationScore,
    clamp_score,
    dense_rank_desc,
    f1_at_k,
    parse_score,
    rank_candidates,
    score_relations,
)

import oracles
from conftest import scripted_gateway, text_node


def make_instance(degrees, gold=()):
    n = len(degrees)
    target = text_node(n, "The target passage.")
    cands = []
    for i, d in enumerate(degrees):
        qs = tuple(Question(f"What links {i} q{k}?", (i, n), k, RETAINED, (("e", "prior"),)) for k in range(d))
        cands.append((text_node(i, f"Candidate {i}."), Edge(i, n, qs)))
    return RecapInstance(target, tuple(cands), frozenset(gold))


def random_case(rng):
    n = int(rng.integers(1, 7))
    degrees = [int(x) for x in rng.integers(0, 4, n)]
    inst = make_instance(degrees)
    rel = {i: int(rng.integers(0, 6)) for i in range(n)}
    selected = {i for i in range(n) if rng.random() < 0.4}
    coeffs = [float(x) for x in rng.choice([0.0, 0.5, 1.0, 2.0, 3.0], 3)]
    if not any(coeffs):
        coeffs[0] = 1.0
    return inst, rel, selected, RecapConfig(*coeffs)


def ours(inst, rel, selected, cfg):
    return rank_candidates(inst, [RelationScore(c, v) for c, v in rel.items()], selected, cfg)


def reference(inst, rel, selected, cfg):
    ids = inst.ids
    deg = {node.id: e.degree for node, e in inst.candidates}
    dist = {c: inst.distance(c) for c in ids}
    return oracles.recap_order(ids, rel, deg, dist, selected, cfg.alpha, cfg.beta, cfg.lambda_boost)


def test_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(300):
        inst, rel, selected, cfg = random_case(rng)
        got = ours(inst, rel, selected, cfg)
        order, scores = reference(inst, rel, selected, cfg)
        assert [r.candidate_id for r in got] == order
        assert all(r.score == scores[r.candidate_id] for r in got)


def test_degenerate_settings():
    inst = make_instance([1, 3, 0, 3, 2])
    rel = {0: 5, 1: 1, 2: 4, 3: 1, 4: 5}
    selected = {0, 3}
    base = ours(inst, rel, selected, RecapConfig(0, 0, 1))
    # baseline picks first, then proximity to the target
    assert [r.candidate_id for r in base] == [3, 0, 4, 2, 1]
    relation = ours(inst, rel, selected, RecapConfig(1, 0, 0))
    assert [r.candidate_id for r in relation] == [4, 0, 2, 3, 1]
    degree = ours(inst, rel, selected, RecapConfig(0, 1, 0))
    assert [r.candidate_id for r in degree] == [3, 1, 4, 0, 2]


def test_dense_rank():
    assert dense_rank_desc([5, 3, 5, 0, 3]) == [1, 2, 1, 3, 2]
    assert dense_rank_desc([]) == []


def test_missing_score_and_bad_config():
    inst = make_instance([1, 1])
    with pytest.raises(ValidationError):
        rank_candidates(inst, [RelationScore(0, 3)], set(), RecapConfig())
    with pytest.raises(ValidationError):
        RecapConfig(0, 0, 0)
    with pytest.raises(ValidationError):
        RecapConfig(alpha=-1)
    with pytest.raises(ValidationError):
        RelationScore(0, 6)


def test_edge_must_point_at_target():
    with pytest.raises(ValidationError):
        RecapInstance(text_node(3, "t."), ((text_node(0, "c."), Edge(0, 2)),))


@pytest.mark.parametrize("reply, value", [
    ("Score: 4", 4.0), ("**Score:** 2.5", 2.5), ("I'd say 3 out of 5", 3.0), ("score=-2", -2.0),
])
def test_parse_score(reply, value):
    assert parse_score(reply) == value


def test_parse_score_failure():
    with pytest.raises(MalformedResponse):
        parse_score("no idea")


def test_clamp_logs(caplog):
    assert clamp_score(7, "c") == 5
    assert clamp_score(-1) == 0
    assert clamp_score(2.6) == 3
    assert "clamped" in caplog.text


def test_score_relations_skips_empty_edges(tmp_path):
    inst = make_instance([2, 0, 1])
    seen = []

    def handler(request):
        seen.append(request)
        if "What links 0" in request.messages[0][1]:
            return "Score: 9"
        return "Score: 1" if len(request.messages) > 1 else "hmm"

    scores = score_relations(inst, scripted_gateway(handler, tmp_path), parallelism=1)
    assert [(s.candidate_id, s.value) for s in scores] == [(0, 5), (1, 0), (2, 1)]
    assert scores[1].raw_llm_output == ""
    assert len(seen) == 3  # one reprompt, none for the empty edge


def test_f1_examples():
    r = f1_at_k(["a", "b", "c", "d", "e", "f"], {"a", "c", "x"}, k=5)
    assert (r.precision, r.recall) == (pytest.approx(0.4), pytest.approx(2 / 3))
    assert r.f1 == pytest.approx(0.5)
    assert f1_at_k(["a"], set(), 5).gold_empty
    assert f1_at_k(["a", "b"], {"z"}, 2).f1 == 0.0
    # short rankings still divide by k
    assert f1_at_k(["a"], {"a"}, 5).precision == pytest.approx(0.2)
    with pytest.raises(ValidationError):
        f1_at_k(["a"], {"a"}, 0)


@settings(max_examples=300, deadline=None)
@given(st.permutations(list(range(6))), st.sets(st.integers(0, 7), max_size=5), st.integers(1, 7))
def test_f1_matches_reference(perm, gold, k):
    r = f1_at_k(perm, gold, k)
    assert (r.precision, r.recall, r.f1) == pytest.approx(oracles.f1(perm, gold, k), abs=1e-12)
