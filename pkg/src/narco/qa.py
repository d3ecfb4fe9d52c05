"""Retrieval-based context assembly for multiple-choice QA, and accuracy scoring."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from narco import prompts
from narco.errors import EmptyGraph, ValidationError
from narco.gateway import ChatRequest, Gateway
from narco.graph import NarrativeGraph
from narco.retrieval import EmbeddingProvider, FusionConfig, retrieve

QA_MODEL = "gpt-3.5-turbo"
TOKENS_PER_WORD_X10 = 13  # ~1.3 tokens per English word


@dataclass(frozen=True)
class MCQuestion:
    stem: str
    options: tuple[tuple[str, str], ...]
    gold_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple((str(l), str(t)) for l, t in self.options))
        labels = self.labels
        if len(labels) < 2:
            raise ValidationError("a multiple-choice question needs at least two options")
        if len(set(labels)) != len(labels):
            raise ValidationError(f"option labels must be unique, got {labels}")
        if self.gold_label is not None and self.gold_label not in labels:
            raise ValidationError(f"gold label {self.gold_label!r} is not an option")

    @property
    def labels(self) -> list[str]:
        return [l for l, _ in self.options]

    @classmethod
    def from_dict(cls, d: dict) -> "MCQuestion":
        return cls(d["stem"], tuple((o["label"], o["text"]) for o in d["options"]), d.get("gold"))

    def options_block(self) -> str:
        return "\n".join(f"({l}) {t}" for l, t in self.options)


@dataclass(frozen=True)
class ContextBudget:
    max_words: int

    def __post_init__(self):
        if self.max_words < 1:
            raise ValidationError("max_words must be >= 1")

    @classmethod
    def from_tokens(cls, tokens: int) -> "ContextBudget":
        return cls(max(1, tokens * 10 // TOKENS_PER_WORD_X10))


@dataclass(frozen=True)
class AssembledContext:
    text: str
    node_ids: tuple[int, ...]
    word_count: int
    truncated: bool = False
    ranking: tuple[int, ...] = field(default=(), compare=False)

    def __str__(self) -> str:
        return self.text


def select_nodes(ranked_ids: Sequence[int], word_counts: Sequence[int], budget: int) -> list[int]:
    """Longest prefix of the ranking whose total word count fits the budget."""
    chosen, used = [], 0
    for node_id in ranked_ids:
        n = word_counts[node_id]
        if used + n > budget:
            break
        chosen.append(node_id)
        used += n
    return chosen


def assemble_from_ranking(graph: NarrativeGraph, ranked_ids: Sequence[int],
                          budget: ContextBudget) -> AssembledContext:
    counts = [len(n.text.split()) for n in graph.nodes]
    chosen = select_nodes(ranked_ids, counts, budget.max_words)
    if not chosen:
        # never return an empty context: cut the best node down to the budget
        top = ranked_ids[0]
        words = graph.nodes[top].text.split()[: budget.max_words]
        return AssembledContext(" ".join(words), (top,), len(words), True, tuple(ranked_ids))
    ordered = sorted(chosen)
    text = "\n\n".join(graph.nodes[i].text for i in ordered)
    return AssembledContext(text, tuple(ordered), sum(counts[i] for i in ordered), False, tuple(ranked_ids))


def retrieval_query(question: MCQuestion, include_options: bool = False) -> str:
    if not include_options:
        return question.stem
    return question.stem + "\n" + "\n".join(t for _, t in question.options)


def assemble_context(question: MCQuestion, graph: NarrativeGraph, provider: EmbeddingProvider,
                     fusion: FusionConfig, budget: ContextBudget,
                     include_options: bool = False) -> AssembledContext:
    """Rank nodes by fused score, admit them greedily by rank, emit in document order."""
    if not graph.nodes:
        raise EmptyGraph("cannot assemble context from a graph with no nodes")
    ranked = [i for i, _ in retrieve(retrieval_query(question, include_options), graph, provider, fusion)]
    return assemble_from_ranking(graph, ranked, budget)


def qa_request(question: MCQuestion, context: str, model: str = QA_MODEL) -> ChatRequest:
    user = prompts.render("qa", context=context, stem=question.stem, options=question.options_block())
    return ChatRequest(model, (("system", prompts.text("qa_system")), ("user", user)), 0.0, 128)


def ask(questions: Sequence[MCQuestion], contexts: Sequence[str], gateway: Gateway,
        model: str = QA_MODEL, parallelism: int = 4) -> list[str]:
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        return list(pool.map(lambda qc: gateway.complete(qa_request(qc[0], qc[1], model)).content,
                             zip(questions, contexts)))


def parse_option_label(reply: str, labels: Iterable[str]) -> str | None:
    """First option label the reply commits to, or ``None``.

    A parenthesized label wins over a bare one, so "A careful reading gives (C)"
    parses as C.
    """
    alts = "|".join(re.escape(l) for l in sorted(labels, key=len, reverse=True))
    if not alts:
        return None
    for pattern in (
        rf"\(\s*({alts})\s*\)",
        rf"(?i:answer|option|choice)\s*(?:is|:)?\s*\**\s*({alts})(?![\w])",
        rf"^\s*\**({alts})\s*[.):\]]",
        # a bare letter followed by a lowercase word is more likely an article ("A lamp ...")
        rf"(?<![\w'’])({alts})(?![\w'’])(?!\s+[a-z])",
    ):
        m = re.search(pattern, reply, re.MULTILINE)
        if m:
            return m.group(1)
    return None


def answer_accuracy(transcripts: Sequence[tuple[MCQuestion, str]],
                    parser: Callable[[str, Iterable[str]], str | None] = parse_option_label) -> dict:
    if not transcripts:
        return {"accuracy": 0.0, "unparsed": 0, "n": 0}
    correct = unparsed = 0
    for question, reply in transcripts:
        if question.gold_label is None:
            raise ValidationError(f"question has no gold label: {question.stem[:60]!r}")
        label = parser(reply, question.labels)
        if label is None:
            unparsed += 1
        elif label == question.gold_label:
            correct += 1
    return {"accuracy": correct / len(transcripts), "unparsed": unparsed, "n": len(transcripts)}
