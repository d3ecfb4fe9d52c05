"""Planted retrieval sets where edge questions carry the only useful signal.

Every vector is an independent random unit vector except that each positive
candidate gets one question vector equal to the query. Query-node cosine is
therefore uninformative, and a fusion head that attends to query-like
questions can recover the positives.
"""

from __future__ import annotations

import numpy as np

from narco.rerank import FusionParams, TrainingBatch, similarities
from narco.retrieval import ndcg_at_k


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def planted_batch(rng: np.random.Generator, n_candidates: int = 16, dim: int = 32,
                  questions: int = 3, max_positives: int = 2) -> TrainingBatch:
    h_q = _unit_rows(rng, 1, dim)[0]
    n_pos = int(rng.integers(1, max_positives + 1))
    positives = frozenset(int(p) for p in rng.choice(n_candidates, size=n_pos, replace=False))
    candidates = []
    for y in range(n_candidates):
        h_v = _unit_rows(rng, 1, dim)[0]
        E = _unit_rows(rng, questions, dim)
        if y in positives:
            E[int(rng.integers(questions))] = h_q
        candidates.append((h_v, E))
    return TrainingBatch(h_q, candidates, positives)


def planted_dataset(n_queries: int = 64, n_candidates: int = 16, dim: int = 32,
                    questions: int = 3, max_positives: int = 2, seed: int = 0) -> list[TrainingBatch]:
    rng = np.random.default_rng(seed)
    return [planted_batch(rng, n_candidates, dim, questions, max_positives) for _ in range(n_queries)]


def baseline_order(batch: TrainingBatch) -> list[int]:
    """Candidates by plain query-node cosine, ties by index."""
    sims = [float(batch.h_q @ h_v) for h_v, _ in batch.candidates]
    return sorted(range(batch.n), key=lambda y: (-sims[y], y))


def fused_order(batch: TrainingBatch, params: FusionParams) -> list[int]:
    sims = similarities(batch, params)
    return sorted(range(batch.n), key=lambda y: (-sims[y], y))


def mean_ndcg(orders: list[list[int]], dataset: list[TrainingBatch], k: int) -> float:
    return float(np.mean([ndcg_at_k(o, {p: 1 for p in b.positives}, k) for o, b in zip(orders, dataset)]))
