"""Graph data model, ``narco/1`` line-delimited JSON format, and statistics."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from narco.chunking import Node, Sentence
from narco.errors import CorruptPayload, ValidationError, VersionMismatch
from narco.gateway import atomic_write_text

FORMAT_VERSION = "narco/1"
FILE_SUFFIX = ".narco.jsonl"

PENDING = "pending"
RETAINED = "retained"
DISCARDED_UNANSWERABLE = "discarded_unanswerable"
DISCARDED_WRONG_SOURCE = "discarded_wrong_source"
VERDICTS = (PENDING, RETAINED, DISCARDED_UNANSWERABLE, DISCARDED_WRONG_SOURCE)
ATTRIBUTIONS = ("prior", "current", "unmatched")

WH_WORDS = ("what", "why", "how", "who", "whom", "whose", "when", "where", "which")


@dataclass(frozen=True)
class Question:
    text: str
    source_pair: tuple[int, int]
    claim_ref: int
    verdict: str = PENDING
    evidence: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        i, j = self.source_pair
        if not i < j:
            raise ValidationError(f"question source pair must satisfy i < j, got {self.source_pair}")
        if self.verdict not in VERDICTS:
            raise ValidationError(f"unknown verdict {self.verdict!r}")
        object.__setattr__(self, "source_pair", (int(i), int(j)))
        object.__setattr__(self, "evidence", tuple((str(s), str(a)) for s, a in self.evidence))
        for _, attribution in self.evidence:
            if attribution not in ATTRIBUTIONS:
                raise ValidationError(f"unknown attribution {attribution!r}")
        if self.verdict == RETAINED and not any(a == "prior" for _, a in self.evidence):
            raise ValidationError("a retained question needs evidence attributed to the prior node")

    def to_dict(self) -> dict[str, Any]:
        return {
            "claim_ref": self.claim_ref,
            "evidence": [[s, a] for s, a in self.evidence],
            "source_pair": list(self.source_pair),
            "text": self.text,
            "verdict": self.verdict,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Question":
        return cls(d["text"], tuple(d["source_pair"]), d["claim_ref"], d["verdict"],
                   tuple(tuple(e) for e in d["evidence"]))


@dataclass(frozen=True)
class Edge:
    """Retained questions from ``target`` that are answered by ``source``.

    An edge may be empty: the pair was examined and nothing survived.
    """

    source: int
    target: int
    questions: tuple[Question, ...] = ()
    discarded_count: int = 0

    def __post_init__(self):
        if not self.source < self.target:
            raise ValidationError(f"edge must run from an earlier to a later node, got {self.source}->{self.target}")
        object.__setattr__(self, "questions", tuple(self.questions))
        if self.discarded_count < 0:
            raise ValidationError("discarded_count must be >= 0")
        for q in self.questions:
            if q.source_pair != (self.source, self.target):
                raise ValidationError(f"question from pair {q.source_pair} stored on edge {self.source}->{self.target}")
            if q.verdict != RETAINED:
                raise ValidationError(f"only retained questions live on edges, got {q.verdict}")

    @property
    def degree(self) -> int:
        return len(self.questions)

    @property
    def generated_count(self) -> int:
        return len(self.questions) + self.discarded_count

    def to_dict(self) -> dict[str, Any]:
        return {
            "discarded_count": self.discarded_count,
            "questions": [q.to_dict() for q in self.questions],
            "source": self.source,
            "target": self.target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Edge":
        return cls(d["source"], d["target"], tuple(Question.from_dict(q) for q in d["questions"]),
                   d["discarded_count"])


def node_to_dict(node: Node) -> dict[str, Any]:
    return {
        "id": node.id,
        "oversize_flag": node.oversize_flag,
        "sentences": [{"char_span": list(s.char_span), "index": s.index, "text": s.text}
                      for s in node.sentences],
        "word_count": node.word_count,
    }


def node_from_dict(d: dict) -> Node:
    sentences = tuple(Sentence(s["text"], tuple(s["char_span"]), s["index"]) for s in d["sentences"])
    return Node(d["id"], sentences, d["word_count"], d["oversize_flag"])


@dataclass(frozen=True)
class NarrativeGraph:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...] = ()
    build_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "build_meta", {**self.build_meta, "format_version": FORMAT_VERSION})
        edges = tuple(sorted(self.edges, key=lambda e: (e.source, e.target)))
        object.__setattr__(self, "edges", edges)
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ValidationError("node ids must be 0..N-1 in order")
        seen = set()
        for e in edges:
            if e.target >= len(ids):
                raise ValidationError(f"edge {e.source}->{e.target} points past the last node")
            if (e.source, e.target) in seen:
                raise ValidationError(f"duplicate edge {e.source}->{e.target}")
            seen.add((e.source, e.target))

    def edge(self, source: int, target: int) -> Edge | None:
        for e in self.edges:
            if e.source == source and e.target == target:
                return e
        return None

    def outgoing_questions(self, node_id: int) -> list[Question]:
        """Questions raised by ``node_id`` and answered by earlier nodes."""
        return [q for e in self.edges if e.target == node_id for q in e.questions]

    def incoming_questions(self, node_id: int) -> list[Question]:
        """Questions raised by later nodes that ``node_id`` answers."""
        return [q for e in self.edges if e.source == node_id for q in e.questions]

    def neighbor_questions(self, node_id: int) -> list[Question]:
        return self.outgoing_questions(node_id) + self.incoming_questions(node_id)

    @property
    def retained_count(self) -> int:
        return sum(e.degree for e in self.edges)

    @property
    def generated_count(self) -> int:
        return sum(e.generated_count for e in self.edges)


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def serialize(graph: NarrativeGraph) -> bytes:
    lines = [_dumps({"section": "meta", "meta": graph.build_meta})]
    lines += [_dumps({"section": "node", "node": node_to_dict(n)}) for n in graph.nodes]
    lines += [_dumps({"section": "edge", "edge": e.to_dict()}) for e in graph.edges]
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize(payload: bytes) -> NarrativeGraph:
    try:
        text = payload.decode("utf-8")
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptPayload(f"not a narco graph: {exc}") from exc
    if not all(isinstance(r, dict) for r in records):
        raise CorruptPayload("every line must be a JSON object")
    if not records or records[0].get("section") != "meta":
        raise CorruptPayload("first record must be the meta section")
    meta = dict(records[0].get("meta", {}))
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"expected format {FORMAT_VERSION!r}, found {version!r}")
    nodes, edges = [], []
    try:
        for rec in records[1:]:
            section = rec.get("section")
            if section == "node":
                nodes.append(node_from_dict(rec["node"]))
            elif section == "edge":
                edges.append(Edge.from_dict(rec["edge"]))
            else:
                raise CorruptPayload(f"unknown section {section!r}")
        return NarrativeGraph(tuple(nodes), tuple(edges), meta)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptPayload(f"malformed record: {exc}") from exc


def save(graph: NarrativeGraph, path) -> None:
    atomic_write_text(Path(path), serialize(graph).decode("utf-8"))


def load(path) -> NarrativeGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


_WORD = re.compile(r"[^\W\d_]+", re.UNICODE)


def question_type(text: str) -> str:
    """First interrogative word of the question, or ``"other"``."""
    for word in _WORD.findall(text.lower()):
        if word in WH_WORDS:
            return word
    return "other"


def node_degrees(graph: NarrativeGraph) -> list[int]:
    degrees = [0] * len(graph.nodes)
    for e in graph.edges:
        degrees[e.source] += e.degree
        degrees[e.target] += e.degree
    return degrees


def graph_stats(graph: NarrativeGraph, classify=question_type) -> dict[str, Any]:
    """Mean node degree (counted in questions), filter rate, question types.

    ``filter_rate`` is ``None`` when no question was ever generated.
    """
    degrees = node_degrees(graph)
    mean_degree = sum(degrees) / len(degrees) if degrees else 0.0
    generated = graph.generated_count
    discarded = sum(e.discarded_count for e in graph.edges)
    histogram = Counter(classify(q.text) for e in graph.edges for q in e.questions)
    return {
        "mean_node_degree": mean_degree,
        "filter_rate": discarded / generated if generated else None,
        "question_type_histogram": dict(sorted(histogram.items())),
        "generated": generated,
        "retained": graph.retained_count,
        "discarded": discarded,
    }
