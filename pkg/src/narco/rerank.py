"""Query-conditioned attention over edge questions, trained as a reranker.

For query ``q``, node embedding ``v`` and question embeddings ``E`` (M x d_e)::

    a   = softmax((q W_Q)(E W_K)^T / sqrt(d))
    h_a = v + a (E W_V)

Candidates are scored by ``q . h_a``. Training minimizes a supervised
contrastive loss over each query's in-batch candidates with plain gradient
descent, warmup, and cosine decay. Embeddings are fixed; only W_Q, W_K and
W_V are learned. Gradients are derived by hand below and checked against
central differences in the test suite.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from narco.errors import DimensionMismatch, NonFiniteLoss, ValidationError
from narco.gateway import atomic_write_text
from narco.graph import NarrativeGraph
from narco.retrieval import EmbeddingProvider, embed

log = logging.getLogger(__name__)

PARAMS_FORMAT = "narco-fusion/1"
DEFAULT_TOP_N = 50


@dataclass
class FusionParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    d: int
    seed: int = 0

    def __post_init__(self):
        self.W_Q = np.asarray(self.W_Q, dtype=float)
        self.W_K = np.asarray(self.W_K, dtype=float)
        self.W_V = np.asarray(self.W_V, dtype=float)
        d_e = self.W_Q.shape[0]
        if self.d < 1:
            raise ValidationError("projection dimension d must be >= 1")
        if self.W_Q.shape != (d_e, self.d) or self.W_K.shape != (d_e, self.d):
            raise DimensionMismatch(f"W_Q and W_K must be {d_e}x{self.d}")
        # the value projection is added to the node embedding, so it maps back to d_e
        if self.W_V.shape != (d_e, d_e):
            raise DimensionMismatch(f"W_V must be {d_e}x{d_e}")
        for w in (self.W_Q, self.W_K, self.W_V):
            if not np.all(np.isfinite(w)):
                raise ValidationError("parameters must be finite")

    @property
    def d_e(self) -> int:
        return self.W_Q.shape[0]

    @classmethod
    def init(cls, d_e: int, d: int | None = None, seed: int = 0) -> "FusionParams":
        d = d_e if d is None else d
        rng = np.random.default_rng(seed)
        scale = 1.0 / math.sqrt(d_e)
        return cls(rng.uniform(-scale, scale, (d_e, d)),
                   rng.uniform(-scale, scale, (d_e, d)),
                   rng.uniform(-scale, scale, (d_e, d_e)), d, seed)

    def copy(self) -> "FusionParams":
        return FusionParams(self.W_Q.copy(), self.W_K.copy(), self.W_V.copy(), self.d, self.seed)

    def equals(self, other: "FusionParams") -> bool:
        return (self.d == other.d and np.array_equal(self.W_Q, other.W_Q)
                and np.array_equal(self.W_K, other.W_K) and np.array_equal(self.W_V, other.W_V))

    def to_dict(self, extra: dict | None = None) -> dict:
        out = {"format": PARAMS_FORMAT, "d": self.d, "d_e": self.d_e, "seed": self.seed,
               "W_Q": self.W_Q.tolist(), "W_K": self.W_K.tolist(), "W_V": self.W_V.tolist()}
        if extra:
            out.update(extra)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FusionParams":
        if d.get("format") != PARAMS_FORMAT:
            raise ValidationError(f"expected params format {PARAMS_FORMAT!r}, found {d.get('format')!r}")
        return cls(np.array(d["W_Q"]), np.array(d["W_K"]), np.array(d["W_V"]), d["d"], d.get("seed", 0))

    def save(self, path, extra: dict | None = None) -> None:
        atomic_write_text(Path(path), json.dumps(self.to_dict(extra), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FusionParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class FusionInstance:
    h_q: np.ndarray
    h_v: np.ndarray
    question_vectors: np.ndarray  # (M, d_e), M may be 0

    def __post_init__(self):
        self.h_q = np.asarray(self.h_q, dtype=float)
        self.h_v = np.asarray(self.h_v, dtype=float)
        self.question_vectors = _as_matrix(self.question_vectors, self.h_v.shape[-1])
        if self.h_q.shape != self.h_v.shape:
            raise DimensionMismatch("query and node embeddings differ in dimension")


def _as_matrix(vectors, d_e: int) -> np.ndarray:
    E = np.asarray(vectors, dtype=float)
    if E.size == 0:
        return np.zeros((0, d_e))
    E = E.reshape(-1, E.shape[-1])
    if E.shape[1] != d_e:
        raise DimensionMismatch(f"question vectors have dimension {E.shape[1]}, expected {d_e}")
    return E


@dataclass
class TrainingBatch:
    """One query, its candidates as ``(h_v, E)`` pairs, and the positive indices."""

    h_q: np.ndarray
    candidates: list[tuple[np.ndarray, np.ndarray]]
    positives: frozenset[int]

    def __post_init__(self):
        self.h_q = np.asarray(self.h_q, dtype=float)
        d_e = self.h_q.shape[-1]
        self.candidates = [(np.asarray(v, dtype=float), _as_matrix(E, d_e)) for v, E in self.candidates]
        self.positives = frozenset(int(p) for p in self.positives)
        if not self.positives:
            raise ValidationError("a training query needs at least one positive")
        if not self.positives <= set(range(len(self.candidates))):
            raise ValidationError("positive indices must point at candidates")

    @property
    def n(self) -> int:
        return len(self.candidates)

    def instance(self, y: int) -> FusionInstance:
        h_v, E = self.candidates[y]
        return FusionInstance(self.h_q, h_v, E)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


def logsumexp(z: np.ndarray) -> float:
    m = float(np.max(z))
    return m + math.log(float(np.sum(np.exp(z - m))))


def _check(params: FusionParams, h_q: np.ndarray, E: np.ndarray) -> None:
    if h_q.shape[-1] != params.d_e:
        raise DimensionMismatch(f"embeddings have dimension {h_q.shape[-1]}, params expect {params.d_e}")
    if E.size and E.shape[1] != params.d_e:
        raise DimensionMismatch("question vectors do not match the parameter dimension")


def attention_weights(h_q, question_vectors, params: FusionParams) -> np.ndarray:
    h_q = np.asarray(h_q, dtype=float)
    E = _as_matrix(question_vectors, h_q.shape[-1])
    _check(params, h_q, E)
    if E.shape[0] == 0:
        return np.zeros(0)
    logits = (E @ params.W_K) @ (h_q @ params.W_Q) / math.sqrt(params.d)
    return softmax(logits)


def fuse(instance: FusionInstance, params: FusionParams) -> np.ndarray:
    """Augmented node embedding ``h_a``; identity on ``h_v`` when there are no questions."""
    E = instance.question_vectors
    _check(params, instance.h_q, E)
    if E.shape[0] == 0:
        return instance.h_v.copy()
    a = attention_weights(instance.h_q, E, params)
    return instance.h_v + a @ (E @ params.W_V)


def similarities(batch: TrainingBatch, params: FusionParams) -> np.ndarray:
    return np.array([batch.h_q @ fuse(batch.instance(y), params) for y in range(batch.n)])


def query_loss(batch: TrainingBatch, params: FusionParams) -> float:
    s = similarities(batch, params)
    lse = logsumexp(s)
    return float(-np.mean([s[x] - lse for x in sorted(batch.positives)]))


def contrastive_loss(batches: TrainingBatch | Sequence[TrainingBatch], params: FusionParams) -> float:
    """Mean over queries of ``-1/|P| sum_{x in P} log softmax(s)_x``."""
    if isinstance(batches, TrainingBatch):
        batches = [batches]
    return float(np.mean([query_loss(b, params) for b in batches]))


@dataclass
class Gradients:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    loss: float

    def norm(self) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            return float(math.sqrt(sum(np.sum(g * g) for g in (self.W_Q, self.W_K, self.W_V))))


def gradients(batches: TrainingBatch | Sequence[TrainingBatch], params: FusionParams) -> Gradients:
    """Exact gradients of :func:`contrastive_loss` with respect to W_Q, W_K, W_V."""
    if isinstance(batches, TrainingBatch):
        batches = [batches]
    gQ = np.zeros_like(params.W_Q)
    gK = np.zeros_like(params.W_K)
    gV = np.zeros_like(params.W_V)
    root_d = math.sqrt(params.d)
    total = 0.0
    n_queries = len(batches)

    for batch in batches:
        h_q = batch.h_q
        _check(params, h_q, np.zeros((0, params.d_e)))
        u = h_q @ params.W_Q
        cache = []
        s = np.empty(batch.n)
        for y, (h_v, E) in enumerate(batch.candidates):
            if E.shape[0] == 0:
                cache.append(None)
                s[y] = h_q @ h_v
                continue
            K = E @ params.W_K
            a = softmax(K @ u / root_d)
            V = E @ params.W_V
            s[y] = h_q @ h_v + a @ (V @ h_q)
            cache.append((E, K, a, V))

        lse = logsumexp(s)
        pos = sorted(batch.positives)
        total += -np.mean([s[x] - lse for x in pos])

        # dL/ds_y for this query, already divided by the number of queries
        g = np.exp(s - lse)
        g[pos] -= 1.0 / len(pos)
        g /= n_queries

        for y, c in enumerate(cache):
            if c is None or g[y] == 0.0:
                continue
            E, K, a, V = c
            gV += g[y] * np.outer(E.T @ a, h_q)
            c_val = V @ h_q
            dz = a * (c_val - a @ c_val)
            gQ += g[y] * np.outer(h_q, K.T @ dz) / root_d
            gK += g[y] * (E.T @ np.outer(dz, u)) / root_d

    return Gradients(gQ, gK, gV, total / n_queries)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    queries_per_batch: int = 20
    learning_rate: float = 2e-5
    warmup_ratio: float = 5e-2
    schedule: str = "cosine"
    seed: int = 0
    d: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.queries_per_batch < 1:
            raise ValidationError("epochs must be >= 0 and queries_per_batch >= 1")
        if self.learning_rate <= 0 or not 0 <= self.warmup_ratio < 1:
            raise ValidationError("learning_rate must be positive and warmup_ratio in [0, 1)")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")


def learning_rate_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup, then cosine decay to zero."""
    warmup = math.ceil(config.warmup_ratio * total_steps)
    if step < warmup:
        return config.learning_rate * (step + 1) / warmup
    if config.schedule == "constant":
        return config.learning_rate
    progress = (step - warmup) / max(1, total_steps - warmup)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    params: FusionParams
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    learning_rates: list[float] = field(default_factory=list)

    def log_dict(self) -> dict:
        return {"step_losses": self.step_losses, "epoch_losses": self.epoch_losses,
                "learning_rates": self.learning_rates}


def train(dataset: Sequence[TrainingBatch], config: TrainConfig = TrainConfig(),
          init: FusionParams | None = None) -> TrainResult:
    if not dataset:
        raise ValidationError("training set is empty")
    d_e = dataset[0].h_q.shape[-1]
    params = init.copy() if init is not None else FusionParams.init(d_e, config.d, config.seed)
    rng = np.random.default_rng(config.seed)
    per_epoch = math.ceil(len(dataset) / config.queries_per_batch)
    total_steps = config.epochs * per_epoch
    result = TrainResult(params)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(dataset), config.queries_per_batch):
            batch = [dataset[k] for k in order[start:start + config.queries_per_batch]]
            grads = gradients(batch, params)
            if not math.isfinite(grads.loss) or not math.isfinite(grads.norm()):
                raise NonFiniteLoss(step, grads.loss)
            lr = learning_rate_at(step, total_steps, config)
            params.W_Q -= lr * grads.W_Q
            params.W_K -= lr * grads.W_K
            params.W_V -= lr * grads.W_V
            result.step_losses.append(grads.loss)
            result.learning_rates.append(lr)
            losses.append(grads.loss)
            step += 1
        result.epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, result.epoch_losses[-1])
    return result


def rerank_vectors(h_q, candidates: Sequence[tuple[object, np.ndarray, np.ndarray]],
                   params: FusionParams, top_n: int = DEFAULT_TOP_N) -> list[tuple[object, float]]:
    """Re-score the first ``top_n`` of ``(id, h_v, E)`` in baseline order by ``h_q . h_a``.

    The tail keeps its baseline order after the reranked head. Tail scores are NaN.
    """
    h_q = np.asarray(h_q, dtype=float)
    head = list(candidates[:top_n])
    scored = []
    for pos, (cid, h_v, E) in enumerate(head):
        s = float(h_q @ fuse(FusionInstance(h_q, h_v, E), params))
        scored.append((-s, pos, cid, s))
    scored.sort(key=lambda t: (t[0], t[1]))
    out = [(cid, s) for _, _, cid, s in scored]
    out += [(cid, float("nan")) for cid, _, _ in candidates[top_n:]]
    return out


def rerank(query: str, baseline_ranked: Sequence[int], graph: NarrativeGraph, params: FusionParams,
           provider: EmbeddingProvider, top_n: int = DEFAULT_TOP_N) -> list[tuple[int, float]]:
    """Rerank node ids using their neighbours' outgoing and incoming questions."""
    head = list(baseline_ranked[:top_n])
    h_q = embed([query], provider)[0]
    h_v = embed([graph.nodes[i].text for i in head], provider) if head else []
    cands = []
    for k, node_id in enumerate(head):
        texts = [q.text for q in graph.neighbor_questions(node_id)]
        E = embed(texts, provider) if texts else np.zeros((0, params.d_e))
        cands.append((node_id, h_v[k], E))
    cands += [(node_id, None, None) for node_id in baseline_ranked[top_n:]]
    return rerank_vectors(h_q, cands, params, top_n)


def training_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
