"""Embedding providers, query-question score fusion, and nDCG.

A node's zero-shot score is its query cosine plus ``lambda_fuse`` times the
best query cosine among the questions the node raises about earlier nodes
(its outgoing questions). A node without questions keeps its base score.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from narco.errors import DimensionMismatch, MissingFixture, ProviderError, ValidationError
from narco.gateway import atomic_write_text
from narco.graph import NarrativeGraph

NORM_TOL = 1e-6
DEFAULT_LAMBDA = 0.1


class NoPositivesWarning(UserWarning):
    """A metric was asked to score a query with no relevant items; it reports 0."""


class EmbeddingProvider(Protocol):
    name: str

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ProviderError("provider returned a zero or non-finite vector")
    return v / n


def _text_seed(seed: int, text: str) -> int:
    h = hashlib.sha256(f"{seed}\x00{text}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


class MockEmbeddingProvider:
    """Seeded pseudo-random unit vector per text. Stable across runs and platforms."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.name = f"mock-{dim}-{seed}"

    def vector(self, text: str) -> np.ndarray:
        rng = np.random.default_rng(_text_seed(self.seed, text))
        return _unit(rng.standard_normal(self.dim))

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(t) for t in texts]) if texts else np.zeros((0, self.dim))


_TOKEN = re.compile(r"[^\W_]+", re.UNICODE)
_STOP = frozenset(
    "a an and are as at be but by for from had has have he her him his i in is it its "
    "of on or she that the their them they this to was were what when where which who "
    "why how with you your not did does do".split()
)


class HashingEmbeddingProvider:
    """Signed feature-hashing bag of words.

    Gives lexically meaningful similarities offline; a text with no content
    words falls back to its mock vector so every output is unit norm.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.name = f"hashing-{dim}-{seed}"
        self._fallback = MockEmbeddingProvider(dim, seed)

    def vector(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in _TOKEN.findall(text.casefold()):
            if tok in _STOP:
                continue
            h = _text_seed(self.seed, tok)
            v[h % self.dim] += 1.0 if (h >> 32) & 1 else -1.0
        if not np.any(v):
            return self._fallback.vector(text)
        return _unit(v)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.vector(t) for t in texts]) if texts else np.zeros((0, self.dim))


class HTTPEmbeddingProvider:
    """``{"model", "input": [...]} -> {"data": [{"embedding": [...]}]}`` over HTTP.

    With ``cache_dir`` set, vectors are stored per text digest; ``replay_strict``
    serves only from that cache.
    """

    def __init__(self, endpoint: str, model: str, credential_ref: str = "OPENAI_API_KEY",
                 timeout: float = 60.0, mode: str = "live", cache_dir: str | None = None,
                 batch_size: int = 64):
        if mode != "live" and not cache_dir:
            raise ValidationError(f"embedding mode {mode!r} needs cache_dir")
        self.endpoint = endpoint
        self.model = model
        self.credential_ref = credential_ref
        self.timeout = timeout
        self.mode = mode
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.batch_size = batch_size
        self.name = f"http-{model}"

    def _path(self, text: str) -> Path:
        key = hashlib.sha256(f"{self.model}\x00{text}".encode("utf-8")).hexdigest()
        return self.cache_dir / f"{key}.json"

    def _fetch(self, texts: list[str]) -> list[list[float]]:
        import httpx

        secret = os.environ.get(self.credential_ref)
        if not secret:
            raise ValidationError(f"environment variable {self.credential_ref} is not set")
        try:
            resp = httpx.post(self.endpoint, json={"model": self.model, "input": texts},
                              headers={"Authorization": f"Bearer {secret}"}, timeout=self.timeout)
        except httpx.HTTPError as exc:
            raise ProviderError(str(exc)) from exc
        if resp.status_code != 200:
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
        return [d["embedding"] for d in data]

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out: dict[int, list[float]] = {}
        todo = []
        for k, t in enumerate(texts):
            if self.cache_dir is not None and self._path(t).exists():
                out[k] = json.loads(self._path(t).read_text(encoding="utf-8"))["embedding"]
            elif self.mode == "replay_strict":
                raise MissingFixture(self._path(t).stem)
            else:
                todo.append(k)
        for start in range(0, len(todo), self.batch_size):
            chunk = todo[start:start + self.batch_size]
            vectors = self._fetch([texts[k] for k in chunk])
            for k, vec in zip(chunk, vectors):
                out[k] = vec
                if self.cache_dir is not None and self.mode == "record":
                    atomic_write_text(self._path(texts[k]), json.dumps({"embedding": vec}))
        return np.array([out[k] for k in range(len(texts))], dtype=float)


class CachedProvider:
    """Memoizes vectors per text so a corpus is embedded once across queries."""

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self.name = inner.name
        self._cache: dict[str, np.ndarray] = {}

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        missing = list(dict.fromkeys(t for t in texts if t not in self._cache))
        if missing:
            for t, v in zip(missing, self.inner.embed_texts(missing)):
                self._cache[t] = v
        if not texts:
            return np.zeros((0, 0))
        return np.stack([self._cache[t] for t in texts])


def embed(texts: Sequence[str], provider: EmbeddingProvider) -> np.ndarray:
    """Unit-norm embeddings, one row per text."""
    texts = list(texts)
    if not texts:
        return np.zeros((0, getattr(provider, "dim", 0)))
    raw = provider.embed_texts(texts)
    try:
        arr = np.asarray(raw, dtype=float)
    except ValueError as exc:
        raise DimensionMismatch("provider returned vectors of differing dimension") from exc
    if arr.ndim != 2 or arr.shape[0] != len(texts):
        raise DimensionMismatch(f"expected {len(texts)} vectors, got array of shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if not np.all(np.isfinite(norms)) or np.any(norms == 0):
        raise ProviderError("provider returned a zero or non-finite vector")
    return arr / norms


@dataclass(frozen=True)
class FusionConfig:
    lambda_fuse: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not math.isfinite(self.lambda_fuse):
            raise ValidationError("lambda_fuse must be finite")
        if self.lambda_fuse < 0:
            raise ValidationError("lambda_fuse must be >= 0")


def _check_dims(*arrays: np.ndarray) -> int:
    dims = {a.shape[-1] for a in arrays if a.size}
    if len(dims) > 1:
        raise DimensionMismatch(f"vector dimensions differ: {sorted(dims)}")
    return dims.pop() if dims else 0


def zero_shot_score(h_q, h_v, question_vectors, config: FusionConfig | float = DEFAULT_LAMBDA) -> float:
    lam = config.lambda_fuse if isinstance(config, FusionConfig) else float(config)
    h_q = np.asarray(h_q, dtype=float)
    h_v = np.asarray(h_v, dtype=float)
    qs = np.asarray(question_vectors, dtype=float)
    if qs.size == 0:
        _check_dims(h_q, h_v)
        return float(h_q @ h_v)
    qs = qs.reshape(-1, qs.shape[-1])
    _check_dims(h_q, h_v, qs)
    return float(h_q @ h_v + lam * np.max(qs @ h_q))


def node_question_vectors(graph: NarrativeGraph, provider: EmbeddingProvider,
                          which: str = "outgoing") -> list[np.ndarray]:
    """Per node, an (M, d) array of question embeddings (M may be 0)."""
    pick = {"outgoing": graph.outgoing_questions, "neighbors": graph.neighbor_questions}[which]
    per_node = [[q.text for q in pick(n.id)] for n in graph.nodes]
    flat = [t for texts in per_node for t in texts]
    vecs = embed(flat, provider) if flat else None
    out, at = [], 0
    for texts in per_node:
        if texts:
            out.append(vecs[at:at + len(texts)])
        else:
            out.append(np.zeros((0, 0)))
        at += len(texts)
    return out


def rank_scores(scores: Mapping[int, float] | Sequence[float]) -> list[tuple[int, float]]:
    """Descending by score, ties by ascending id."""
    items = scores.items() if isinstance(scores, Mapping) else enumerate(scores)
    return sorted(((int(i), float(s)) for i, s in items), key=lambda p: (-p[1], p[0]))


def retrieve(query: str, graph: NarrativeGraph, provider: EmbeddingProvider,
             config: FusionConfig | None = None, k: int | None = None) -> list[tuple[int, float]]:
    config = config or FusionConfig()
    if not graph.nodes:
        raise ValidationError("cannot retrieve from an empty graph")
    h_q = embed([query], provider)[0]
    h_v = embed([n.text for n in graph.nodes], provider)
    qvecs = node_question_vectors(graph, provider)
    scores = [zero_shot_score(h_q, h_v[n], qvecs[n], config) for n in range(len(graph.nodes))]
    ranked = rank_scores(scores)
    return ranked if k is None else ranked[:k]


def dcg(gains: Iterable[float]) -> float:
    return sum(g / math.log2(rank + 1) for rank, g in enumerate(gains, start=1))


def ndcg_at_k(ranked_ids: Sequence, relevance: Mapping, k: int) -> float:
    """Binary-gain nDCG@k. Returns 0.0 with a :class:`NoPositivesWarning` when nothing is relevant."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    positives = sum(1 for v in relevance.values() if v > 0)
    if positives == 0:
        warnings.warn("no relevant items; nDCG defined as 0", NoPositivesWarning, stacklevel=2)
        return 0.0
    gains = [1.0 if relevance.get(i, 0) > 0 else 0.0 for i in list(ranked_ids)[:k]]
    ideal = dcg([1.0] * min(k, positives))
    return dcg(gains) / ideal
