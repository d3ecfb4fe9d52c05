"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import functools
import itertools
import math


def recap_scores(ids, rel, deg, dist, selected, alpha, beta, lam):
    """s_i from first principles: count who beats whom."""
    out = {}
    for c in ids:
        r_rel = 1 + len({rel[o] for o in ids if rel[o] > rel[c]})
        r_deg = 1 + sum(1 for o in ids if (-deg[o], dist[o], o) < (-deg[c], dist[c], c))
        out[c] = alpha * r_rel + beta * r_deg - lam * (1.0 if c in selected else 0.0)
    return out


def recap_order(ids, rel, deg, dist, selected, alpha, beta, lam):
    """The unique permutation that is sorted by (s, distance, id), found by enumeration."""
    s = recap_scores(ids, rel, deg, dist, selected, alpha, beta, lam)
    key = lambda c: (s[c], dist[c], c)
    for perm in itertools.permutations(ids):
        if all(key(a) <= key(b) for a, b in zip(perm, perm[1:])):
            return list(perm), s
    raise AssertionError("no sorted permutation")


def f1(ranked, gold, k):
    top = ranked[:k]
    hits = sum(1 for x in top if x in gold)
    if not gold or hits == 0:
        return 0.0, 0.0, 0.0
    p, r = hits / k, hits / len(gold)
    return p, r, 2 * p * r / (p + r)


def dcg_at(ranked, positives, k):
    return sum(1.0 / math.log2(p + 2) for p in range(min(k, len(ranked))) if ranked[p] in positives)


@functools.lru_cache(maxsize=None)
def ideal_dcg(items: tuple, positives: frozenset, k: int) -> float:
    """Best achievable DCG, by trying every ordering."""
    return max(dcg_at(perm, positives, k) for perm in itertools.permutations(items))


def ndcg(ranked, positives, k):
    best = ideal_dcg(tuple(sorted(ranked)), frozenset(positives), k)
    return dcg_at(ranked, positives, k) / best if best else 0.0


def assembled_ok(ranked, counts, budget, chosen_doc_order):
    """Reference check for greedy-prefix admission within a word budget."""
    prefix, used = [], 0
    for r in ranked:
        if used + counts[r] > budget:
            break
        prefix.append(r)
        used += counts[r]
    return sorted(prefix) == list(chosen_doc_order) and used <= budget
