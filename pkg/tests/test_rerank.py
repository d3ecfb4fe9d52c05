import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narco.errors import DimensionMismatch, NonFiniteLoss, ValidationError
from narco.rerank import (
    FusionInstance,
    FusionParams,
    TrainConfig,
    TrainingBatch,
    attention_weights,
    contrastive_loss,
    fuse,
    gradients,
    learning_rate_at,
    rerank_vectors,
    softmax,
    train,
)
from narco.synthetic import baseline_order, fused_order, mean_ndcg, planted_dataset


def random_batches(seed, n_queries=2, n_cand=4, m=3, d_e=8, empty=False):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_queries):
        cands = []
        for y in range(n_cand):
            mm = 0 if empty and y == 0 else m
            cands.append((rng.standard_normal(d_e), rng.standard_normal((mm, d_e))))
        pos = rng.choice(n_cand, size=int(rng.integers(1, 3)), replace=False)
        out.append(TrainingBatch(rng.standard_normal(d_e), cands, frozenset(int(p) for p in pos)))
    return out


def numeric_grad(batches, params, name, eps=1e-6):
    W = getattr(params, name)
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        old = W[idx]
        W[idx] = old + eps
        up = contrastive_loss(batches, params)
        W[idx] = old - eps
        down = contrastive_loss(batches, params)
        W[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    batches = random_batches(seed, empty=True)
    params = FusionParams.init(8, d=5, seed=seed)
    g = gradients(batches, params)
    assert g.loss == pytest.approx(contrastive_loss(batches, params), abs=1e-12)
    for name in ("W_Q", "W_K", "W_V"):
        assert rel_err(getattr(g, name), numeric_grad(batches, params, name)) <= 1e-5


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1.0) <= 1e-12 and np.all(p >= 0)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    params = FusionParams.init(6, seed=1)
    for m in (1, 2, 7):
        a = attention_weights(rng.standard_normal(6), rng.standard_normal((m, 6)), params)
        assert a.shape == (m,) and abs(a.sum() - 1.0) <= 1e-12


def test_single_question_fuse_is_exact():
    rng = np.random.default_rng(2)
    params = FusionParams.init(5, d=3, seed=2)
    h_q, h_v, h_e = rng.standard_normal((3, 5))
    assert np.array_equal(fuse(FusionInstance(h_q, h_v, h_e[None]), params), h_v + h_e @ params.W_V)


def test_no_questions_is_identity():
    params = FusionParams.init(4)
    h_v = np.arange(4.0)
    assert np.array_equal(fuse(FusionInstance(np.ones(4), h_v, np.zeros((0, 4))), params), h_v)


def test_param_validation_and_round_trip(tmp_path):
    with pytest.raises(DimensionMismatch):
        FusionParams(np.zeros((4, 2)), np.zeros((4, 3)), np.zeros((4, 4)), 2)
    with pytest.raises(DimensionMismatch):
        FusionParams(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros((4, 2)), 2)
    with pytest.raises(ValidationError):
        FusionParams(np.full((2, 2), np.inf), np.zeros((2, 2)), np.zeros((2, 2)), 2)
    p = FusionParams.init(6, d=3, seed=9)
    p.save(tmp_path / "p.json", extra={"note": 1})
    assert FusionParams.load(tmp_path / "p.json").equals(p)
    with pytest.raises(DimensionMismatch):
        fuse(FusionInstance(np.ones(5), np.ones(5), np.ones((1, 5))), p)


def test_training_batch_validation():
    with pytest.raises(ValidationError):
        TrainingBatch(np.ones(3), [(np.ones(3), np.ones((1, 3)))], frozenset())
    with pytest.raises(ValidationError):
        TrainingBatch(np.ones(3), [(np.ones(3), np.ones((1, 3)))], frozenset({2}))


def test_learning_rate_schedule():
    cfg = TrainConfig(learning_rate=1.0, warmup_ratio=0.1)
    lrs = [learning_rate_at(s, 100, cfg) for s in range(100)]
    assert lrs[0] == pytest.approx(0.1) and lrs[9] == pytest.approx(1.0)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] < 0.01
    assert learning_rate_at(50, 100, TrainConfig(learning_rate=1.0, warmup_ratio=0.0, schedule="constant")) == 1.0
    with pytest.raises(ValidationError):
        TrainConfig(schedule="linear")


def test_training_lowers_loss_and_is_deterministic():
    data = planted_dataset(n_queries=12, n_candidates=6, dim=8, seed=4)
    cfg = TrainConfig(epochs=15, queries_per_batch=4, learning_rate=5.0, seed=4)
    a, b = train(data, cfg), train(data, cfg)
    assert a.params.equals(b.params) and a.step_losses == b.step_losses
    assert a.epoch_losses[-1] < a.epoch_losses[0]
    assert len(a.step_losses) == 15 * 3


def test_training_zero_epochs_returns_init():
    data = planted_dataset(n_queries=3, n_candidates=4, dim=6, seed=0)
    init = FusionParams.init(6, seed=0)
    assert train(data, TrainConfig(epochs=0), init=init).params.equals(init)


def test_non_finite_loss_aborts():
    data = planted_dataset(n_queries=4, n_candidates=4, dim=6, seed=0)
    huge = FusionParams.init(6, seed=0)
    huge.W_V *= 1e306
    with pytest.raises(NonFiniteLoss):
        train(data, TrainConfig(epochs=1), init=huge)


def test_rerank_vectors_head_and_tail():
    params = FusionParams.init(3, seed=0)
    params.W_V[:] = 0.0
    h_q = np.array([1.0, 0.0, 0.0])
    cands = [("a", np.array([0.1, 0, 0]), np.zeros((0, 3))),
             ("b", np.array([0.9, 0, 0]), np.ones((2, 3))),
             ("c", np.array([0.5, 0, 0]), np.zeros((0, 3))),
             ("d", None, None)]
    out = rerank_vectors(h_q, cands, params, top_n=3)
    assert [c for c, _ in out] == ["b", "c", "a", "d"]
    assert math.isnan(out[-1][1])


def test_planted_set_is_hard_for_the_baseline():
    data = planted_dataset(seed=0)
    assert mean_ndcg([baseline_order(b) for b in data], data, 1) < 0.3
    init = FusionParams.init(32, seed=0)
    assert mean_ndcg([fused_order(b, init) for b in data], data, 10) < 0.7
