"""Edge realization: two-turn question generation, then back verification.

For a pair (v_i, v_j) with i < j the generator first asks which parts of
v_i set up events in v_j, then turns each connection into a question asked
from v_j. Every question is then answered over the two passages joined by a
blank line, with no marker at the join. A question survives only if the
verifier calls it answerable and at least one quoted evidence sentence is
found in v_i.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import string
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from narco import prompts
from narco.chunking import Node
from narco.errors import MalformedResponse, NarcoError, ValidationError
from narco.gateway import ChatRequest, Gateway, atomic_write_text, canonical_json
from narco.graph import (
    DISCARDED_UNANSWERABLE,
    DISCARDED_WRONG_SOURCE,
    PENDING,
    RETAINED,
    Edge,
    NarrativeGraph,
    Question,
)

log = logging.getLogger(__name__)

DEFAULT_CAP = 4
DEFAULT_WINDOW = 4
SEPARATOR = "\n\n"
NGRAM = 4
OVERLAP_THRESHOLD = 0.8

GENERATION_MODEL = "gpt-4-1106-preview"
VERIFICATION_MODEL = "gpt-3.5-turbo"


@dataclass(frozen=True)
class ConnectionClaim:
    prior_excerpt: str
    event_in_current: str
    explanation: str

    def __post_init__(self):
        if not self.prior_excerpt.strip():
            raise ValidationError("prior_excerpt must be non-empty")


@dataclass(frozen=True)
class VerificationContext:
    concatenated_text: str
    boundary_offset: int

    @classmethod
    def from_pair(cls, prior: str, current: str) -> "VerificationContext":
        return cls(prior + SEPARATOR + current, len(prior) + len(SEPARATOR))

    @property
    def prior(self) -> str:
        return self.concatenated_text[: self.boundary_offset]

    @property
    def current(self) -> str:
        return self.concatenated_text[self.boundary_offset:]


# ---------------------------------------------------------------- parsing

_ITEM = re.compile(r"^\s*(?:\d+)\s*[.)]\s*(.*)$")
_CLAIM = re.compile(
    r"prior\s*:\s*(?P<prior>.*?)\s*\|\s*current\s*:\s*(?P<current>.*?)\s*(?:\|\s*why\s*:\s*(?P<why>.*))?$",
    re.IGNORECASE | re.DOTALL,
)
_QUOTES = "\"'“”‘’`"


def _is_none_reply(text: str) -> bool:
    return text.strip().strip(".").lower() in {"none", "no connections", "n/a"}


def parse_numbered_list(text: str) -> list[str]:
    """Items of a ``1. ...`` list; unnumbered lines continue the previous item."""
    items: list[str] = []
    for line in text.splitlines():
        m = _ITEM.match(line)
        if m:
            items.append(m.group(1).strip())
        elif items and line.strip():
            items[-1] = f"{items[-1]} {line.strip()}"
    return [i for i in items if i]


def parse_claims(text: str) -> list[ConnectionClaim]:
    if _is_none_reply(text):
        return []
    items = parse_numbered_list(text)
    if not items:
        raise MalformedResponse("expected a numbered list of connections or 'None'", text)
    claims = []
    for item in items:
        m = _CLAIM.search(item)
        if not m:
            raise MalformedResponse(f"connection item lacks Prior/Current fields: {item[:80]!r}", text)
        prior = m.group("prior").strip().strip(_QUOTES).strip()
        if not prior:
            raise MalformedResponse("connection item has an empty prior excerpt", text)
        claims.append(ConnectionClaim(prior, m.group("current").strip(), (m.group("why") or "").strip()))
    return claims


def parse_questions(text: str) -> list[str]:
    items = [i.strip().strip(_QUOTES).strip() for i in parse_numbered_list(text)]
    items = [i for i in items if i]
    if not items:
        raise MalformedResponse("expected a numbered list of questions", text)
    return items


_ANSWERABLE = re.compile(r"^\s*\**answerable\**\s*:\s*\**\s*(yes|no)\b", re.IGNORECASE | re.MULTILINE)
_EVIDENCE_HEADER = re.compile(r"^\s*\**evidence\**\s*:(.*)$", re.IGNORECASE | re.MULTILINE)


def parse_verification(text: str) -> tuple[bool, list[str]]:
    m = _ANSWERABLE.search(text)
    if not m:
        raise MalformedResponse("verification reply lacks an 'Answerable: yes/no' line", text)
    answerable = m.group(1).lower() == "yes"
    evidence: list[str] = []
    h = _EVIDENCE_HEADER.search(text)
    if h:
        inline = h.group(1).strip()
        if inline and inline.lower().strip(".") != "none":
            evidence.append(inline)
        evidence += parse_numbered_list(text[h.end():])
    evidence = [e.strip().strip(_QUOTES).strip() for e in evidence]
    return answerable, [e for e in evidence if e]


# ------------------------------------------------------------ attribution

def normalize_for_match(text: str) -> str:
    """Case-fold, drop punctuation, collapse whitespace."""
    folded = text.casefold()
    kept = "".join(" " if unicodedata.category(c).startswith("P") or c in string.punctuation else c
                   for c in folded)
    return " ".join(kept.split())


def char_ngrams(text: str, n: int = NGRAM) -> set[str]:
    if len(text) < n:
        return {text} if text else set()
    return {text[k:k + n] for k in range(len(text) - n + 1)}


def ngram_overlap(evidence: str, half: str, n: int = NGRAM) -> float:
    """Share of the evidence's character n-grams that occur in ``half``."""
    grams = char_ngrams(evidence, n)
    if not grams:
        return 0.0
    return len(grams & char_ngrams(half, n)) / len(grams)


def attribute_evidence(evidence_sentence: str, ctx: VerificationContext,
                       threshold: float = OVERLAP_THRESHOLD) -> str:
    """``prior``, ``current`` or ``unmatched``. Matches in both halves go to ``current``."""
    ev = normalize_for_match(evidence_sentence)
    if not ev:
        return "unmatched"
    prior = normalize_for_match(ctx.prior)
    current = normalize_for_match(ctx.current)
    in_prior, in_current = ev in prior, ev in current
    if in_current:
        return "current"
    if in_prior:
        return "prior"
    p, c = ngram_overlap(ev, prior), ngram_overlap(ev, current)
    if max(p, c) < threshold:
        return "unmatched"
    return "current" if c >= p else "prior"


# ----------------------------------------------------------------- builder

class PartialBuild(NarcoError):
    """Some pairs failed; successful pairs are checkpointed and kept on ``graph``."""

    def __init__(self, graph: NarrativeGraph, failures: dict[tuple[int, int], str]):
        super().__init__(f"{len(failures)} pair(s) failed: "
                         + "; ".join(f"{p}: {e}" for p, e in sorted(failures.items())[:3]))
        self.graph = graph
        self.failures = failures


def window_pairs(n_nodes: int, window: int) -> list[tuple[int, int]]:
    return [(j - w, j) for j in range(n_nodes) for w in range(window, 0, -1) if j - w >= 0]


@dataclass
class EdgeBuilder:
    gateway: Gateway
    verifier: Gateway | None = None
    generation_model: str = GENERATION_MODEL
    verification_model: str = VERIFICATION_MODEL
    cap: int = DEFAULT_CAP
    temperature: float = 0.0
    max_output: int = 1024
    parallelism: int = 4
    checkpoint_dir: str | None = None
    stats: dict = field(default_factory=lambda: {"reprompts": 0})

    def __post_init__(self):
        if self.cap < 1:
            raise ValidationError("cap must be >= 1")
        if self.verifier is None:
            self.verifier = self.gateway

    def _ask(self, gateway: Gateway, request: ChatRequest, parse):
        """Send, parse; on a parse failure re-ask once with a format reminder."""
        reply = gateway.complete(request).content
        try:
            return request, reply, parse(reply)
        except MalformedResponse:
            self.stats["reprompts"] += 1
            request = request.followed_by(("assistant", reply), ("user", prompts.render("format_reminder")))
            reply = gateway.complete(request).content
            return request, reply, parse(reply)

    def generate_questions(self, v_i: Node, v_j: Node, cap: int | None = None) -> list[Question]:
        if not v_i.id < v_j.id:
            raise ValidationError(f"prior node must precede current node, got {v_i.id}, {v_j.id}")
        cap = self.cap if cap is None else cap
        if cap < 1:
            raise ValidationError("cap must be >= 1")
        turn1 = ChatRequest(
            self.generation_model,
            (("user", prompts.render("qg_turn1", prior=v_i.text, current=v_j.text, cap=cap)),),
            self.temperature, self.max_output,
        )
        conv, reply, claims = self._ask(self.gateway, turn1, parse_claims)
        if not claims:
            return []
        turn2 = conv.followed_by(("assistant", reply), ("user", prompts.render("qg_turn2")))
        _, _, texts = self._ask(self.gateway, turn2, parse_questions)
        n = min(cap, len(claims), len(texts))
        if len(texts) != len(claims):
            log.warning("pair (%d, %d): %d connections but %d questions", v_i.id, v_j.id,
                        len(claims), len(texts))
        return [Question(texts[k], (v_i.id, v_j.id), k) for k in range(n)]

    def verify_question(self, q: Question, ctx: VerificationContext) -> Question:
        if q.verdict != PENDING:
            raise ValidationError(f"question already resolved as {q.verdict}")
        request = ChatRequest(
            self.verification_model,
            (("user", prompts.render("verify", context=ctx.concatenated_text, question=q.text)),),
            self.temperature, self.max_output,
        )
        _, _, (answerable, sentences) = self._ask(self.verifier, request, parse_verification)
        evidence = tuple((s, attribute_evidence(s, ctx)) for s in sentences)
        if not answerable:
            verdict = DISCARDED_UNANSWERABLE
        elif any(a == "prior" for _, a in evidence):
            verdict = RETAINED
        else:
            verdict = DISCARDED_WRONG_SOURCE
        return replace(q, verdict=verdict, evidence=evidence)

    def build_edge(self, v_i: Node, v_j: Node) -> Edge:
        ctx = VerificationContext.from_pair(v_i.text, v_j.text)
        verified = [self.verify_question(q, ctx) for q in self.generate_questions(v_i, v_j)]
        kept = tuple(q for q in verified if q.verdict == RETAINED)
        return Edge(v_i.id, v_j.id, kept, len(verified) - len(kept))

    # -- checkpoints

    def pair_key(self, v_i: Node, v_j: Node) -> str:
        payload = {
            "pair": [v_i.id, v_j.id], "prior": v_i.text, "current": v_j.text, "cap": self.cap,
            "models": [self.generation_model, self.verification_model],
            "temperature": self.temperature, "max_output": self.max_output,
            "prompts": prompts.digest(),
        }
        return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()

    def _checkpointed(self, v_i: Node, v_j: Node) -> Edge:
        if not self.checkpoint_dir:
            return self.build_edge(v_i, v_j)
        path = Path(self.checkpoint_dir) / f"{self.pair_key(v_i, v_j)}.json"
        if path.exists():
            return Edge.from_dict(json.loads(path.read_text(encoding="utf-8")))
        edge = self.build_edge(v_i, v_j)
        atomic_write_text(path, canonical_json(edge.to_dict()) + "\n")
        return edge

    def build_meta(self, window: int | None, pair_mode: str) -> dict:
        return {
            "cap": self.cap,
            "window": window,
            "pairs": pair_mode,
            "prompt_versions": {k: v for k, v in prompts.VERSIONS.items()
                                if k in ("qg_turn1", "qg_turn2", "verify", "format_reminder")},
            "prompt_digest": prompts.digest("qg_turn1", "qg_turn2", "verify", "format_reminder"),
            "models": {"generation": self.generation_model, "verification": self.verification_model},
            "temperature": self.temperature,
        }

    def build_graph(self, nodes: Sequence[Node], window: int | None = DEFAULT_WINDOW,
                    pair_override: Sequence[tuple[int, int]] | None = None,
                    extra_meta: dict | None = None) -> NarrativeGraph:
        if pair_override is not None:
            pairs = sorted({(int(i), int(j)) for i, j in pair_override})
            mode = "override"
        else:
            if window is None or window < 1:
                raise ValidationError("window must be >= 1 when no pair list is given")
            pairs = window_pairs(len(nodes), window)
            mode = "window"
        for i, j in pairs:
            if not 0 <= i < j < len(nodes):
                raise ValidationError(f"pair ({i}, {j}) is not a valid forward pair")

        def run(pair):
            i, j = pair
            try:
                return pair, self._checkpointed(nodes[i], nodes[j]), None
            except NarcoError as exc:
                log.error("pair %s failed: %s", pair, exc)
                return pair, None, f"{type(exc).__name__}: {exc}"

        with ThreadPoolExecutor(max_workers=max(1, self.parallelism)) as pool:
            results = list(pool.map(run, pairs))

        edges = [edge for _, edge, err in results if err is None]
        failures = {pair: err for pair, _, err in results if err is not None}
        meta = self.build_meta(window if mode == "window" else None, mode)
        meta.update(extra_meta or {})
        graph = NarrativeGraph(tuple(nodes), tuple(edges), meta)
        if failures:
            raise PartialBuild(graph, failures)
        return graph
