"""Recap candidate ranking from edge questions.

Each preceding candidate gets two ranks: by an LLM relation score computed
from the candidate's edge questions alone (never its text), and by its edge
degree. The final score is

    s = alpha * rel_rank + beta * deg_rank - lambda_boost * [baseline picked it]

and candidates are taken in ascending ``s``.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Collection, Iterable, Sequence

from narco import prompts
from narco.chunking import Node
from narco.errors import MalformedResponse, ValidationError
from narco.gateway import ChatRequest, Gateway
from narco.graph import Edge

log = logging.getLogger(__name__)

SCORING_MODEL = "gpt-4-1106-preview"
MIN_SCORE, MAX_SCORE = 0, 5


@dataclass(frozen=True)
class RecapConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lambda_boost: float = 3.0
    k: int = 5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lambda_boost) < 0:
            raise ValidationError("alpha, beta and lambda_boost must be >= 0")
        if self.alpha == self.beta == self.lambda_boost == 0:
            raise ValidationError("at least one of alpha, beta, lambda_boost must be positive")
        if self.k < 1:
            raise ValidationError("k must be >= 1")


@dataclass(frozen=True)
class RecapInstance:
    target: Node
    candidates: tuple[tuple[Node, Edge], ...]
    gold: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "gold", frozenset(self.gold))
        for node, edge in self.candidates:
            if edge.target != self.target.id or edge.source != node.id:
                raise ValidationError(
                    f"edge {edge.source}->{edge.target} does not link candidate {node.id} to target {self.target.id}")

    def distance(self, candidate_id: int) -> int:
        return self.target.id - candidate_id

    @property
    def ids(self) -> list[int]:
        return [node.id for node, _ in self.candidates]


@dataclass(frozen=True)
class RelationScore:
    candidate_id: int
    value: int
    raw_llm_output: str = ""

    def __post_init__(self):
        if not MIN_SCORE <= self.value <= MAX_SCORE:
            raise ValidationError(f"relation score {self.value} outside [0, 5]")


@dataclass(frozen=True)
class RankedCandidate:
    candidate_id: int
    score: float
    relation_rank: int
    degree_rank: int
    baseline_selected: bool


_SCORE = re.compile(r"score\s*[:=]?\s*\**\s*(-?\d+(?:\.\d+)?)", re.IGNORECASE)
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?")


def parse_score(text: str) -> float:
    m = _SCORE.search(text) or _NUMBER.search(text)
    if not m:
        raise MalformedResponse("no numeric score in reply", text)
    return float(m.group(1) if m.re is _SCORE else m.group(0))


def clamp_score(raw: float, candidate_id=None) -> int:
    value = int(round(raw))
    clamped = min(MAX_SCORE, max(MIN_SCORE, value))
    if clamped != raw:
        log.warning("relation score %r for candidate %s clamped to %d", raw, candidate_id, clamped)
    return clamped


def relation_request(target: Node, edge: Edge, model: str = SCORING_MODEL) -> ChatRequest:
    questions = "\n".join(f"- {q.text}" for q in edge.questions)
    content = prompts.render("relation_score", target=target.text, questions=questions)
    return ChatRequest(model, (("user", content),), 0.0, 64)


def score_relations(instance: RecapInstance, gateway: Gateway, model: str = SCORING_MODEL,
                    parallelism: int = 4) -> list[RelationScore]:
    """One relation score per candidate, in candidate order.

    Candidates with an empty edge score 0 without a gateway call.
    """

    def score(pair: tuple[Node, Edge]) -> RelationScore:
        node, edge = pair
        if not edge.questions:
            return RelationScore(node.id, 0, "")
        request = relation_request(instance.target, edge, model)
        reply = gateway.complete(request).content
        try:
            raw = parse_score(reply)
        except MalformedResponse:
            request = request.followed_by(("assistant", reply), ("user", prompts.render("format_reminder")))
            reply = gateway.complete(request).content
            raw = parse_score(reply)
        return RelationScore(node.id, clamp_score(raw, node.id), reply)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        return list(pool.map(score, instance.candidates))


def dense_rank_desc(values: Sequence[float]) -> list[int]:
    """1 for the largest value; equal values share a rank; no gaps."""
    order = {v: r for r, v in enumerate(sorted(set(values), reverse=True), start=1)}
    return [order[v] for v in values]


def rank_candidates(instance: RecapInstance, relation_scores: Iterable[RelationScore],
                    baseline_selection: Collection, config: RecapConfig) -> list[RankedCandidate]:
    by_id = {r.candidate_id: r.value for r in relation_scores}
    ids = instance.ids
    missing = [c for c in ids if c not in by_id]
    if missing:
        raise ValidationError(f"relation scores missing for candidates {missing}")
    rel_rank = dict(zip(ids, dense_rank_desc([by_id[c] for c in ids])))

    degree = {node.id: edge.degree for node, edge in instance.candidates}
    by_degree = sorted(ids, key=lambda c: (-degree[c], instance.distance(c), c))
    deg_rank = {c: r for r, c in enumerate(by_degree, start=1)}

    selected = set(baseline_selection)
    ranked = []
    for c in ids:
        b = c in selected
        s = config.alpha * rel_rank[c] + config.beta * deg_rank[c] - config.lambda_boost * float(b)
        ranked.append(RankedCandidate(c, s, rel_rank[c], deg_rank[c], b))
    ranked.sort(key=lambda r: (r.score, instance.distance(r.candidate_id), r.candidate_id))
    return ranked


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float
    gold_empty: bool = False

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "gold_empty": self.gold_empty}


def f1_at_k(ranked_ids: Sequence, gold: Collection, k: int = 5) -> F1Result:
    """Set-overlap P/R/F1 of the first ``k`` ids against ``gold``.

    Precision divides by ``k``. An empty gold set yields zeros with ``gold_empty``.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    gold = set(gold)
    if not gold:
        return F1Result(0.0, 0.0, 0.0, gold_empty=True)
    hits = len(set(list(ranked_ids)[:k]) & gold)
    p = hits / k
    r = hits / len(gold)
    f1 = 2 * p * r / (p + r) if hits else 0.0
    return F1Result(p, r, f1)


@dataclass
class RecapResult:
    ranking: list[RankedCandidate]
    relation_scores: list[RelationScore]
    metrics: F1Result | None = None
    meta: dict = field(default_factory=dict)

    @property
    def top_ids(self) -> list[int]:
        return [r.candidate_id for r in self.ranking]
