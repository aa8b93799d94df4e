"""Dual-stream MIL head, the multiple-instance ranking loss and aggregator training."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .data import Dataset
from .encoder import EncoderParams, embed_array
from .numerics import Adam, DimensionError, Tensor

BCE_EPS = 1e-7


_TRAINED = ("w_ins", "b_ins", "w_bag", "b_bag", "W_q")


@dataclass
class AggregatorParams:
    """Trainable heads plus fixed input standardization buffers.

    Embeddings enter as ``(h - center) * inv_scale``; the buffers start as
    the identity and are refit from the training embeddings by
    :func:`train_aggregator` (relu embeddings share a large positive common
    mode that otherwise dominates the first Adam steps).
    """

    w_ins: Tensor
    b_ins: Tensor
    w_bag: Tensor
    b_bag: Tensor
    W_q: Tensor
    center: Optional[np.ndarray] = None
    inv_scale: Optional[np.ndarray] = None

    @property
    def embed_dim(self) -> int:
        return self.w_ins.shape[0]

    def parameters(self) -> list[Tensor]:
        return [getattr(self, k) for k in _TRAINED]

    def state(self) -> dict[str, np.ndarray]:
        st = {k: getattr(self, k).data for k in _TRAINED}
        st["center"] = self.center if self.center is not None else np.zeros(self.embed_dim)
        st["inv_scale"] = self.inv_scale if self.inv_scale is not None else np.ones(self.embed_dim)
        return st

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "AggregatorParams":
        p = cls(**{k: Tensor(state[k].copy(), requires_grad=True) for k in _TRAINED})
        if "center" in state:
            p.center = state["center"].copy()
            p.inv_scale = state["inv_scale"].copy()
        return p

    def fit_standardization(self, embeddings: Sequence[np.ndarray]) -> None:
        H = np.concatenate(list(embeddings))
        self.center = H.mean(axis=0)
        sd = H.std(axis=0)
        # constant (e.g. relu-dead) dimensions pass through centered, unscaled
        self.inv_scale = np.where(sd > 1e-8, 1.0 / np.where(sd > 1e-8, sd, 1.0), 1.0)

    def standardize(self, H) -> Tensor:
        H = nx.as_tensor(H)
        if self.center is None:
            return H
        return nx.mul(nx.sub(H, self.center), self.inv_scale)

    def copy(self) -> "AggregatorParams":
        return AggregatorParams.from_state(self.state())


def init_aggregator(embed_dim: int, query_dim: int, seed: int) -> AggregatorParams:
    """Zero classifier heads, random query transform.

    A random instance head can start anti-aligned with the positive class,
    and max-pooling gradients never recover from that (the top instance of
    every bag is then a plain negative). From zero, the first updates follow
    the positive-bag minus negative-bag mean embedding instead.
    """
    rng = np.random.default_rng(seed)
    scale = np.sqrt(1.0 / embed_dim)
    return AggregatorParams(
        w_ins=Tensor(np.zeros(embed_dim), requires_grad=True),
        b_ins=Tensor(np.zeros(()), requires_grad=True),
        w_bag=Tensor(np.zeros(embed_dim), requires_grad=True),
        b_bag=Tensor(np.zeros(()), requires_grad=True),
        W_q=Tensor(rng.standard_normal((embed_dim, query_dim)) * scale, requires_grad=True),
    )


class BagForward(NamedTuple):
    scores: Tensor
    max_index: int
    attention: Tensor
    prob: Tensor


def _check(params: AggregatorParams, H: Tensor) -> None:
    if H.data.ndim != 2 or H.shape[0] < 1 or H.shape[1] != params.embed_dim:
        raise DimensionError(f"expected embeddings [n>=1, {params.embed_dim}], got {H.shape}")


# The underscored variants take already-standardized embeddings.

def _logits(params: AggregatorParams, Z: Tensor) -> Tensor:
    return nx.add(nx.matmul(Z, params.w_ins), params.b_ins)


def _attention(params: AggregatorParams, Z: Tensor, m: int) -> Tensor:
    Q = nx.matmul(Z, params.W_q)
    return nx.softmax(nx.matmul(Q, nx.take(Q, m)))


def _bag_predict(params: AggregatorParams, Z: Tensor) -> BagForward:
    logits = _logits(params, Z)
    scores = nx.sigmoid(logits)
    m = int(nx.top_k_indices(scores.data, 1)[0])
    u = _attention(params, Z, m)
    pooled = nx.matmul(u, Z)
    bag_logit = nx.add(nx.matmul(pooled, params.w_bag), params.b_bag)
    prob = nx.sigmoid(nx.mul(nx.add(nx.take(logits, m), bag_logit), 0.5))
    return BagForward(scores, m, u, prob)


def instance_logits(params: AggregatorParams, H) -> Tensor:
    H = nx.as_tensor(H)
    _check(params, H)
    return _logits(params, params.standardize(H))


def instance_scores(params: AggregatorParams, H) -> Tensor:
    """Per-instance positiveness in (0, 1)."""
    return nx.sigmoid(instance_logits(params, H))


def attention_weights(params: AggregatorParams, H, m: int) -> Tensor:
    """Softmax over i of <W_q h_i, W_q h_m>."""
    H = nx.as_tensor(H)
    _check(params, H)
    if not 0 <= m < H.shape[0]:
        raise IndexError(f"max index {m} outside bag of {H.shape[0]}")
    return _attention(params, params.standardize(H), m)


def bag_predict(params: AggregatorParams, H) -> BagForward:
    """Dual-stream bag probability.

    Logit of the top-scoring instance and logit of the attention-pooled
    embedding are averaged, then squashed. Ties for the top score go to
    the lowest index; no gradient flows through that choice.
    """
    H = nx.as_tensor(H)
    _check(params, H)
    return _bag_predict(params, params.standardize(H))


def mi_ranking_loss(pos_scores, neg_scores, K: int = 10) -> Tensor:
    """Hinge on the gap between top-K mean scores of a positive and a negative bag."""
    pos, neg = nx.as_tensor(pos_scores), nx.as_tensor(neg_scores)
    if pos.data.size == 0 or neg.data.size == 0:
        raise ValueError("mi_ranking_loss needs at least one score per bag")
    return nx.hinge(nx.add(nx.sub(1.0, nx.top_k_mean(pos, K)), nx.top_k_mean(neg, K)))


def bce(prob, label: int) -> Tensor:
    p = nx.clip(nx.as_tensor(prob), BCE_EPS, 1.0 - BCE_EPS)
    return nx.mul(nx.log(p if label == 1 else nx.sub(1.0, p)), -1.0)


def mil_loss(prob, label: int, rank_loss, w_b: float = 0.5, w_r: float = 0.1) -> Tensor:
    return nx.add(nx.mul(bce(prob, label), w_b), nx.mul(nx.as_tensor(rank_loss), w_r))


def embed_dataset(encoder: EncoderParams, dataset: Dataset) -> list[np.ndarray]:
    return [embed_array(encoder, b.features) for b in dataset.bags]


def train_aggregator(train: Dataset, encoder: EncoderParams, params: AggregatorParams,
                     config: TrainConfig, seed: int,
                     embeddings: Optional[Sequence[np.ndarray]] = None):
    """Adam on one bag per step; returns ``(params, history)``.

    Each epoch visits every bag once in shuffled order. A positive-bag step
    adds the ranking term against a randomly drawn negative bag; a
    negative-bag step has rank term 0. ``history`` holds per-epoch means of
    ``(bce, rank, total)`` over steps.
    """
    train.require_both_classes("training set")
    if embeddings is None:
        embeddings = embed_dataset(encoder, train)
    if config.agg_epochs == 0:
        return params, []
    if config.standardize:
        params.fit_standardization(embeddings)
    H = [params.standardize(h) for h in embeddings]
    labels = train.labels
    neg_idx = np.flatnonzero(labels == 0)
    rng = np.random.default_rng(seed)
    opt = Adam(params.parameters(), lr=config.lr)
    zero = Tensor(0.0)
    history = []
    for _ in range(config.agg_epochs):
        order = rng.permutation(len(H))
        partners = neg_idx[rng.integers(len(neg_idx), size=len(H))]
        sums = np.zeros(3)
        for i in order:
            fwd = _bag_predict(params, H[i])
            if labels[i] == 1:
                rank = mi_ranking_loss(fwd.scores, nx.sigmoid(_logits(params, H[partners[i]])), config.K)
            else:
                rank = zero
            b = bce(fwd.prob, int(labels[i]))
            loss = nx.add(nx.mul(b, config.w_b), nx.mul(rank, config.w_r))
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += (b.item(), rank.item(), loss.item())
        history.append(tuple(sums / len(H)))
    return params, history


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "bce", "rank", "total"])
        for e, (b, r, t) in enumerate(history):
            w.writerow([e, repr(float(b)), repr(float(r)), repr(float(t))])
