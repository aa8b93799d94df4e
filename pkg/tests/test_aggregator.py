import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hnmil import numerics as nx
from hnmil.aggregator import (AggregatorParams, attention_weights, bag_predict, bce, init_aggregator,
                              instance_scores, mi_ranking_loss, mil_loss, train_aggregator, write_history)
from hnmil.config import TrainConfig
from hnmil.data import Bag, Dataset, StratificationError, SyntheticSpec, generate_synthetic
from hnmil.encoder import EncoderParams, encode, init_encoder
from hnmil.numerics import DimensionError, Tensor


def head(w_ins, w_bag, W_q, b_ins=0.0, b_bag=0.0):
    t = lambda v: Tensor(np.array(v, dtype=float), requires_grad=True)
    return AggregatorParams(t(w_ins), t(b_ins), t(w_bag), t(b_bag), t(W_q))


def test_zero_instance_weights_give_half():
    p = head([0, 0], [0, 0], np.eye(2))
    np.testing.assert_array_equal(instance_scores(p, np.random.default_rng(0).normal(size=(4, 2))).data, 0.5)


def test_instance_score_hand_value():
    p = head([2, 0], [0, 0], np.eye(2))
    assert instance_scores(p, [[1.0, 0.0]]).data[0] == pytest.approx(0.8808, abs=1e-4)


@given(arrays(np.float64, (6, 3), elements=st.floats(-30, 30)))
def test_scores_strictly_inside_unit_interval(H):
    p = head([0.3, -0.2, 0.5], [0, 0, 0], np.eye(3))
    s = instance_scores(p, H).data
    assert np.all((s > 0) & (s < 1))


def test_attention_singleton():
    p = head([0, 0], [0, 0], np.eye(2))
    np.testing.assert_array_equal(attention_weights(p, [[1.0, 2.0]], 0).data, [1.0])


def test_attention_identical_embeddings_split_evenly():
    p = head([0, 0], [0, 0], np.eye(2))
    np.testing.assert_allclose(attention_weights(p, [[1.0, 2.0], [1.0, 2.0]], 1).data, [0.5, 0.5])


def test_attention_hand_softmax():
    p = head([0, 0], [0, 0], np.eye(2))
    u = attention_weights(p, [[1.0, 0.0], [0.0, 0.0]], 0).data
    e = math.e
    np.testing.assert_allclose(u, [e / (e + 1), 1 / (e + 1)], atol=1e-15)


def test_attention_bad_index():
    p = head([0, 0], [0, 0], np.eye(2))
    with pytest.raises(IndexError):
        attention_weights(p, [[1.0, 0.0]], 3)


def test_bag_predict_singleton():
    p = head([0.4, -1.0], [2.0, 0.5], np.eye(2))
    h = np.array([[1.5, 0.7]])
    fwd = bag_predict(p, h)
    expected = 1 / (1 + math.exp(-0.5 * (h[0] @ [0.4, -1.0] + h[0] @ [2.0, 0.5])))
    assert fwd.prob.item() == pytest.approx(expected, abs=1e-15)


def test_bag_predict_zero_heads():
    assert bag_predict(head([0, 0], [0, 0], np.eye(2)), [[1.0, 3.0], [2.0, 1.0]]).prob.item() == 0.5


def test_bag_predict_hand_composition():
    fwd = bag_predict(head([4, 0], [0, 0], np.eye(2)), [[1.0, 0.0], [0.0, 0.0]])
    assert fwd.max_index == 0
    assert fwd.prob.item() == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-15)


def test_bag_predict_max_ties_pick_lowest_index():
    fwd = bag_predict(head([1, 0], [0, 0], np.eye(2)), [[0.0, 1.0], [2.0, 0.0], [2.0, 5.0]])
    assert fwd.max_index == 1


def test_bag_predict_shape_error():
    with pytest.raises(DimensionError):
        bag_predict(head([1, 0], [0, 0], np.eye(2)), np.ones((3, 3)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_bag_forward_invariants_and_permutation(seed, n):
    rng = np.random.default_rng(seed)
    p = head(rng.normal(size=4), rng.normal(size=4), rng.normal(size=(4, 3)))
    H = rng.normal(size=(n, 4))
    fwd = bag_predict(p, H)
    u = fwd.attention.data
    assert np.all(u >= 0) and u.sum() == pytest.approx(1.0, abs=1e-12)
    assert 0 < fwd.prob.item() < 1
    perm = rng.permutation(n)
    assert bag_predict(p, H[perm]).prob.item() == pytest.approx(fwd.prob.item(), abs=1e-12)


# ranking loss

def test_rank_perfect_separation_is_zero():
    for K in (1, 3, 10):
        assert mi_ranking_loss(np.ones(5), np.zeros(4), K).item() == 0.0


def test_rank_hand_values():
    assert mi_ranking_loss([0.9], [0.2], K=1).item() == pytest.approx(0.3, abs=1e-12)
    assert mi_ranking_loss([0.8, 0.6, 0.1], [0.5, 0.3], K=2).item() == pytest.approx(0.7, abs=1e-12)


def test_rank_k_default_is_ten():
    pos = np.linspace(0.0, 1.0, 20)
    neg = np.full(20, 0.5)
    assert mi_ranking_loss(pos, neg).item() == pytest.approx(1 - pos[-10:].mean() + 0.5, abs=1e-12)
    assert TrainConfig().K == 10


def test_rank_empty_bag_rejected():
    with pytest.raises(ValueError):
        mi_ranking_loss([], [0.3])


unit = st.floats(1e-6, 1 - 1e-6)


@settings(max_examples=200)
@given(st.lists(unit, min_size=1, max_size=15), st.lists(unit, min_size=1, max_size=15), st.integers(1, 12))
def test_rank_bounds_and_brute_force(pos, neg, K):
    loss = mi_ranking_loss(pos, neg, K).item()
    top = lambda v: float(np.mean(sorted(v, reverse=True)[:min(K, len(v))]))
    assert loss == pytest.approx(max(0.0, 1 - top(pos) + top(neg)), abs=1e-12)
    assert 0.0 <= loss < 2.0


@settings(max_examples=100)
@given(st.lists(unit, min_size=2, max_size=10), st.lists(unit, min_size=2, max_size=10),
       st.integers(1, 5), st.integers(0, 9), st.floats(0.0, 0.5))
def test_rank_monotone(pos, neg, K, j, bump):
    base = mi_ranking_loss(pos, neg, K).item()
    up_pos = list(pos)
    up_pos[j % len(pos)] = min(1 - 1e-9, up_pos[j % len(pos)] + bump)
    up_neg = list(neg)
    up_neg[j % len(neg)] = min(1 - 1e-9, up_neg[j % len(neg)] + bump)
    assert mi_ranking_loss(up_pos, neg, K).item() <= base + 1e-12
    assert mi_ranking_loss(pos, up_neg, K).item() >= base - 1e-12


# combined loss

def test_mil_loss_hand_values():
    assert mil_loss(Tensor(1 - 1e-12), 1, 0.0).item() == pytest.approx(0.5 * -math.log(1 - 1e-7), abs=1e-12)
    assert TrainConfig().w_b == 0.5 and TrainConfig().w_r == 0.1
    prob = math.exp(-0.3)
    assert mil_loss(Tensor(prob), 1, 0.7).item() == pytest.approx(0.22, abs=1e-12)


def test_bce_clamps():
    assert bce(Tensor(0.0), 1).item() == pytest.approx(-math.log(1e-7))
    assert bce(Tensor(1.0), 0).item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_mil_loss_gradient_through_encoder_and_aggregator():
    rng = np.random.default_rng(11)
    enc = init_encoder(3, [5], 4, 2, seed=4)
    agg = init_aggregator(4, 3, seed=4)
    agg.w_ins = Tensor(rng.normal(size=4), requires_grad=True)
    agg.w_bag = Tensor(rng.normal(size=4), requires_grad=True)
    Xp, Xn = rng.normal(size=(4, 3)) + 0.5, rng.normal(size=(3, 3))

    def loss(W0, b0, W1, b1, w_ins, w_bag, W_q):
        e = EncoderParams([W0, W1], [b0, b1], enc.proj)
        a = AggregatorParams(w_ins, agg.b_ins, w_bag, agg.b_bag, W_q)
        fwd = bag_predict(a, encode(e, Xp))
        rank = mi_ranking_loss(fwd.scores, instance_scores(a, encode(e, Xn)), K=2)
        return mil_loss(fwd.prob, 1, rank)

    base = [enc.weights[0].data, enc.biases[0].data + 0.4, enc.weights[1].data, enc.biases[1].data + 0.4,
            agg.w_ins.data, agg.w_bag.data, agg.W_q.data]
    assert nx.grad_check(loss, base) < 1e-4


# training

def _linearly_separable():
    ds = generate_synthetic(SyntheticSpec(d_in=6, n_bags=12, min_instances=8, max_instances=12,
                                          alpha=0.0, mean_gap=8.0, witness_rate=0.5, seed=2))
    return ds, init_encoder(6, [8], 6, 3, seed=0)


def test_zero_epochs_leaves_params():
    ds, enc = _linearly_separable()
    p = init_aggregator(6, 3, seed=0)
    before = {k: v.copy() for k, v in p.state().items()}
    q, hist = train_aggregator(ds, enc, p, TrainConfig(agg_epochs=0), seed=0)
    assert hist == []
    for k, v in q.state().items():
        assert v.tobytes() == before[k].tobytes()


def test_training_loss_settles_and_is_seed_deterministic(tmp_path):
    ds, enc = _linearly_separable()
    cfg = TrainConfig(agg_epochs=40, lr=1e-3)
    _, h1 = train_aggregator(ds, enc, init_aggregator(6, 3, seed=0), cfg, seed=5)
    _, h2 = train_aggregator(ds, enc, init_aggregator(6, 3, seed=0), cfg, seed=5)
    assert h1 == h2
    totals = np.array([t for _, _, t in h1])
    second = totals[len(totals) // 2:]
    windows = [np.median(w) for w in np.array_split(second, 4)]
    assert all(b <= a + 1e-12 for a, b in zip(windows, windows[1:]))
    write_history(tmp_path / "h.csv", h1)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,bce,rank,total" and len(lines) == 41


def test_single_class_training_rejected():
    ds = Dataset((Bag("a", 1, np.ones((2, 3))), Bag("b", 1, np.ones((2, 3)))), 3)
    with pytest.raises(StratificationError):
        train_aggregator(ds, init_encoder(3, [], 2, 2, seed=0), init_aggregator(2, 2, 0),
                         TrainConfig(agg_epochs=1), seed=0)


def test_state_round_trip_keeps_standardization():
    p = init_aggregator(3, 2, seed=1)
    p.fit_standardization([np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 5.0]])])
    q = AggregatorParams.from_state(p.state())
    np.testing.assert_array_equal(q.center, [2.0, 2.0, 4.0])
    # constant column passes through unscaled
    np.testing.assert_array_equal(q.inv_scale, [1.0, 1.0, 1.0])
