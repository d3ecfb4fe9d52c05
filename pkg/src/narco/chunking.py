"""Sentence segmentation and greedy word-budget chunking.

Paragraph breaks (blank lines) are hard boundaries; inside a paragraph,
whole sentences are packed left to right until the next one would push the
chunk past ``max_words``. A sentence is never split, so a sentence longer
than the budget becomes its own flagged node.
"""

from __future__ import annotations

import bisect
import re
from dataclasses import dataclass

DEFAULT_MAX_WORDS = 240

# Tokens that end in a period without ending a sentence. Matched
# case-insensitively against the word right before the period.
ABBREVIATIONS = frozenset(
    {
        "mr", "mrs", "ms", "messrs", "mme", "mlle", "dr", "st", "prof", "sr",
        "jr", "mt", "lt", "col", "gen", "capt", "sgt", "cpl", "rev", "hon",
        "gov", "sen", "rep", "fr", "bros", "e.g", "i.e", "vs", "cf", "viz",
    }
)

_TERMINATOR = re.compile(r"""[.!?…]+["'”’)\]]*(?=\s)""")
_PARAGRAPH_BREAK = re.compile(r"\n\s*\n")
_LEADING_PUNCT = "\"'([“‘"


@dataclass(frozen=True)
class Sentence:
    text: str
    char_span: tuple[int, int]
    index: int

    @property
    def word_count(self) -> int:
        return len(self.text.split())


@dataclass(frozen=True)
class Node:
    id: int
    sentences: tuple[Sentence, ...]
    word_count: int
    oversize_flag: bool = False

    @property
    def text(self) -> str:
        return " ".join(s.text for s in self.sentences)

    @classmethod
    def from_text(cls, id: int, text: str, max_words: int | None = None) -> "Node":
        """Wrap an already-chunked passage (e.g. a provided snippet) as one node."""
        sentences = tuple(split_sentences(text))
        words = sum(s.word_count for s in sentences)
        oversize = max_words is not None and words > max_words
        return cls(id=id, sentences=sentences, word_count=words, oversize_flag=oversize)


def _normalize(s: str) -> str:
    return " ".join(s.split())


def _is_abbreviation(text: str, period_pos: int) -> bool:
    start = period_pos
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    token = text[start:period_pos].lstrip(_LEADING_PUNCT).lower()
    return token in ABBREVIATIONS


def _boundaries(text: str) -> list[int]:
    """Offsets where one sentence ends and the next may begin."""
    cuts = [m.start() for m in _PARAGRAPH_BREAK.finditer(text)]
    for m in _TERMINATOR.finditer(text):
        end = m.end()
        rest = text[end:].lstrip()
        if not rest:
            continue
        if rest[0].islower():
            continue
        if m.group().startswith(".") and m.group().rstrip("\"'”’)]") == ".":
            if _is_abbreviation(text, m.start()):
                continue
        cuts.append(end)
    return sorted(set(cuts))


def split_sentences(text: str) -> list[Sentence]:
    sentences: list[Sentence] = []
    start = 0
    for cut in _boundaries(text) + [len(text)]:
        segment = text[start:cut]
        stripped = segment.strip()
        if stripped:
            lo = start + (len(segment) - len(segment.lstrip()))
            hi = lo + len(stripped)
            sentences.append(Sentence(_normalize(stripped), (lo, hi), len(sentences)))
        start = cut
    return sentences


def _paragraph_starts(text: str) -> list[int]:
    return [m.end() for m in _PARAGRAPH_BREAK.finditer(text)]


def chunk_text(text: str, max_words: int = DEFAULT_MAX_WORDS) -> list[Node]:
    if max_words < 1:
        raise ValueError(f"max_words must be >= 1, got {max_words}")
    sentences = split_sentences(text)
    para_starts = _paragraph_starts(text)

    nodes: list[Node] = []
    current: list[Sentence] = []
    current_words = 0
    current_para = -1

    def flush(oversize: bool = False) -> None:
        nonlocal current, current_words
        if current:
            nodes.append(Node(len(nodes), tuple(current), current_words, oversize))
        current, current_words = [], 0

    for s in sentences:
        para = bisect.bisect_right(para_starts, s.char_span[0])
        if para != current_para:
            flush()
            current_para = para
        n = s.word_count
        if n > max_words:
            flush()
            current, current_words = [s], n
            flush(oversize=True)
        elif current_words + n <= max_words:
            current.append(s)
            current_words += n
        else:
            flush()
            current, current_words = [s], n
    flush()
    return nodes


def join_nodes(nodes: list[Node]) -> str:
    """Inverse of :func:`chunk_text` up to whitespace: one paragraph per node."""
    return "\n\n".join(node.text for node in nodes)
