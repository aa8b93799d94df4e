"""Pseudo-label tables, instance banks with hard-negative mining, and
supervised contrastive fine-tuning of the encoder."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .data import Dataset
from .encoder import EncoderParams, encode, project
from .numerics import Adam, Tensor

POSITIVE_BAG = "positive-bag"
NEGATIVE_BAG = "negative-bag"
NORM_EPS = 1e-12
CAP_BASES = ("positive_bag", "above_threshold")


class BankError(LookupError):
    pass


def fraction_count(r: float, n: int) -> int:
    """``ceil(r * n)`` robust to products like 0.05 * 10000 landing a hair above an integer."""
    return min(n, math.ceil(r * n - 1e-9))


@dataclass
class PseudoLabelTable:
    """Column store, one row per instance, rows in dataset order."""

    bag_index: np.ndarray
    bag_id: list
    instance_index: np.ndarray
    score: np.ndarray
    pseudo_label: np.ndarray
    from_positive: np.ndarray

    def __post_init__(self):
        if len(self.score) == 0:
            raise ValueError("empty pseudo-label table")
        if not np.all(np.isfinite(self.score)):
            raise ValueError("pseudo-label table holds non-finite scores")
        if np.any(self.pseudo_label[~self.from_positive] != 0):
            raise ValueError("negative-bag instance carries pseudo label 1")

    def __len__(self) -> int:
        return len(self.score)

    @property
    def source(self) -> list[str]:
        return [POSITIVE_BAG if p else NEGATIVE_BAG for p in self.from_positive]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bag_id", "instance_index", "score", "pseudo_label", "source"])
            for r in range(len(self)):
                w.writerow([self.bag_id[r], int(self.instance_index[r]), repr(float(self.score[r])),
                            int(self.pseudo_label[r]), POSITIVE_BAG if self.from_positive[r] else NEGATIVE_BAG])

    @classmethod
    def read_csv(cls, path) -> "PseudoLabelTable":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = [r["bag_id"] for r in rows]
        index_of = {b: i for i, b in enumerate(dict.fromkeys(ids))}
        return cls(
            bag_index=np.array([index_of[b] for b in ids], dtype=np.int64),
            bag_id=ids,
            instance_index=np.array([int(r["instance_index"]) for r in rows], dtype=np.int64),
            score=np.array([float(r["score"]) for r in rows]),
            pseudo_label=np.array([int(r["pseudo_label"]) for r in rows], dtype=np.int64),
            from_positive=np.array([r["source"] == POSITIVE_BAG for r in rows]),
        )


def label_table(dataset: Dataset, scores: Sequence[np.ndarray], threshold: float) -> PseudoLabelTable:
    """Threshold instance scores into pseudo labels; negative bags are all 0."""
    bag_index, bag_id, inst, sc, lab, src = [], [], [], [], [], []
    for i, (bag, s) in enumerate(zip(dataset.bags, scores)):
        n = len(bag)
        bag_index.append(np.full(n, i))
        bag_id += [bag.id] * n
        inst.append(np.arange(n))
        sc.append(np.asarray(s, dtype=np.float64))
        lab.append((s > threshold).astype(np.int64) if bag.label == 1 else np.zeros(n, dtype=np.int64))
        src.append(np.full(n, bag.label == 1))
    return PseudoLabelTable(np.concatenate(bag_index), bag_id, np.concatenate(inst),
                            np.concatenate(sc), np.concatenate(lab), np.concatenate(src))


@dataclass
class InstanceBanks:
    """Ordered ``(bag_index, instance_index)`` references for both banks."""

    pos: np.ndarray
    neg: np.ndarray
    params: dict = field(default_factory=dict)
    bag_ids: Optional[list] = None

    @property
    def skip(self) -> bool:
        """No usable anchors of one kind: fine-tuning must be skipped."""
        return len(self.pos) == 0 or len(self.neg) == 0

    def locate(self, ref) -> tuple[str, int]:
        ref = tuple(int(v) for v in ref)
        for name, bank in (("pos", self.pos), ("neg", self.neg)):
            hits = np.flatnonzero((bank[:, 0] == ref[0]) & (bank[:, 1] == ref[1])) if len(bank) else []
            if len(hits):
                return name, int(hits[0])
        raise BankError(f"instance {ref} is in neither bank")

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bank", "rank", "bag_id", "instance_index"])
            for name, bank in (("pos", self.pos), ("neg", self.neg)):
                for r, (b, j) in enumerate(bank):
                    bid = self.bag_ids[b] if self.bag_ids is not None else str(int(b))
                    w.writerow([name, r, bid, int(j)])
        meta = dict(self.params, pos_size=len(self.pos), neg_size=len(self.neg), skip=self.skip)
        with open(json_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _ranked(table: PseudoLabelTable, rows: np.ndarray) -> np.ndarray:
    """``rows`` ordered by score descending, then bag id, then instance index."""
    if len(rows) == 0:
        return rows
    ids = np.asarray(table.bag_id, dtype=object)[rows]
    _, id_rank = np.unique(ids.astype(str), return_inverse=True)
    keys = (table.instance_index[rows], id_rank, -table.score[rows])
    return rows[np.lexsort(keys)]


def build_banks(table: PseudoLabelTable, r_p: float = 0.2, r_n: float = 0.05,
                threshold: float = 0.3, pos_cap_basis: str = "positive_bag") -> InstanceBanks:
    """Positive bank: positive-bag instances scoring above ``threshold``,
    best first, capped at ``ceil(r_p * #positive-bag instances)``, or at
    ``ceil(r_p * #instances above threshold)`` when ``pos_cap_basis`` is
    ``"above_threshold"``.
    Negative bank: the ``ceil(r_n * #negative-bag instances)`` highest-scoring
    negative-bag instances (hard negatives)."""
    if not (0 < r_p <= 1 and 0 < r_n <= 1):
        raise ValueError(f"r_p and r_n must lie in (0, 1], got {r_p}, {r_n}")
    pos_rows = np.flatnonzero(table.from_positive)
    neg_rows = np.flatnonzero(~table.from_positive)
    above = pos_rows[table.score[pos_rows] > threshold]
    if pos_cap_basis not in CAP_BASES:
        raise ValueError(f"pos_cap_basis must be one of {CAP_BASES}, got {pos_cap_basis!r}")
    pos_cap = fraction_count(r_p, len(pos_rows) if pos_cap_basis == "positive_bag" else len(above))
    neg_cap = fraction_count(r_n, len(neg_rows))
    pos = _ranked(table, above)[:pos_cap]
    neg = _ranked(table, neg_rows)[:neg_cap]
    assert not np.any(table.from_positive[neg]), "negative bank drew from a positive bag"

    def refs(rows):
        return np.stack([table.bag_index[rows], table.instance_index[rows]], axis=1).astype(np.int64) \
            if len(rows) else np.zeros((0, 2), dtype=np.int64)

    names = list(dict.fromkeys(table.bag_id))
    params = {"r_p": r_p, "r_n": r_n, "threshold": threshold, "pos_cap_basis": pos_cap_basis,
              "pos_candidates": int(len(above)), "pos_cap": pos_cap,
              "n_positive_bag_instances": int(len(pos_rows)),
              "n_negative_bag_instances": int(len(neg_rows)), "neg_cap": neg_cap}
    return InstanceBanks(refs(pos), refs(neg), params, names)


def _draw(rng: np.random.Generator, pool: int, exclude: Optional[int], count: int) -> np.ndarray:
    """Positions sampled without replacement from ``range(pool)`` minus ``exclude``."""
    avail = pool - (exclude is not None)
    take = min(count, avail)
    picks = rng.choice(avail, size=take, replace=False) if take else np.zeros(0, dtype=np.int64)
    if exclude is not None:
        picks = picks + (picks >= exclude)
    return picks


def sample_pairs(banks: InstanceBanks, anchor_ref, n_same: int, n_diff: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Same-label and different-label references for one anchor."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    which, pos = banks.locate(anchor_ref)
    same, other = (banks.pos, banks.neg) if which == "pos" else (banks.neg, banks.pos)
    s = _draw(rng, len(same), pos, n_same)
    d = _draw(rng, len(other), None, n_diff)
    return same[s], other[d]


def supcon_loss(anchor_z, same_z, diff_z, tau: float = 0.5) -> Tensor:
    """Supervised contrastive loss for one anchor, with exp(a.b / tau) similarity.

    The denominator sums over every same-label and different-label vector,
    so the loss is ``logsumexp(all logits) - mean(same logits)``.
    """
    a = nx.as_tensor(anchor_z)
    S = nx.as_tensor(same_z)
    if S.data.ndim != 2 or S.shape[0] == 0:
        raise ValueError("supcon_loss needs at least one same-label vector")
    ls = nx.mul(nx.matmul(S, a), 1.0 / tau)
    D = None if diff_z is None else nx.as_tensor(diff_z)
    if D is not None and D.data.size:
        everything = nx.concat([ls, nx.mul(nx.matmul(D, a), 1.0 / tau)])
    else:
        everything = ls
    return nx.sub(nx.logsumexp(everything, axis=0), nx.mean(ls))


def batched_supcon(Z: Tensor, anchors: np.ndarray, same: np.ndarray, same_mask: np.ndarray,
                   diff: np.ndarray, diff_mask: np.ndarray, tau: float) -> Tensor:
    """Mean of :func:`supcon_loss` over a batch of anchors.

    ``Z`` holds the projected vectors of every instance the batch touches;
    ``anchors[b]``, ``same[b, :]`` and ``diff[b, :]`` index into it, with
    masks marking real (unpadded) entries.
    """
    sim = nx.mul(nx.matmul(nx.take(Z, anchors), nx.transpose(Z)), 1.0 / tau)
    rows = np.arange(len(anchors))[:, None]
    cols = np.concatenate([same, diff], axis=1)
    mask = np.concatenate([same_mask, diff_mask], axis=1)
    logits = nx.take(sim, (np.broadcast_to(rows, cols.shape), cols))
    lse = nx.logsumexp(nx.add(logits, np.where(mask, 0.0, -np.inf)), axis=1)
    w = np.concatenate([same_mask / same_mask.sum(axis=1, keepdims=True),
                        np.zeros(diff.shape)], axis=1)
    pulled = nx.tsum(nx.mul(logits, w), axis=1)
    return nx.mean(nx.sub(lse, pulled))


@dataclass
class FinetuneResult:
    params: EncoderParams
    instances_processed: int
    losses: list
    negatives_processed: int = 0


def finetune_encoder(encoder: EncoderParams, dataset: Dataset, banks: InstanceBanks,
                     config: TrainConfig, seed: int) -> FinetuneResult:
    """Contrastive fine-tuning over the banks; returns a new parameter set.

    Every epoch shuffles ``pos + neg`` anchors, draws same/different
    partners per anchor and takes one Adam step per ``ft_batch_size``
    anchors. ``instances_processed`` counts anchor visits;
    ``negatives_processed`` counts the negative-bank share of them.
    """
    if banks.skip:
        raise BankError("fine-tuning needs nonempty positive and negative banks")
    params = encoder.copy()
    refs = np.concatenate([banks.pos, banks.neg])
    n_pos = len(banks.pos)
    rng = np.random.default_rng(seed)
    opt = Adam(params.parameters(), lr=config.finetune_lr)
    processed = neg_processed = 0
    losses = []
    for _ in range(config.ft_epochs):
        order = rng.permutation(len(refs))
        epoch_loss, steps = 0.0, 0
        for start in range(0, len(order), config.ft_batch_size):
            batch = order[start:start + config.ft_batch_size]
            same_l, diff_l = [], []
            for k in batch:
                if k < n_pos:
                    s = _draw(rng, n_pos, int(k), config.n_same)
                    d = n_pos + _draw(rng, len(banks.neg), None, config.n_diff)
                else:
                    s = n_pos + _draw(rng, len(banks.neg), int(k) - n_pos, config.n_same)
                    d = _draw(rng, n_pos, None, config.n_diff)
                same_l.append(s)
                diff_l.append(d)
            keep = [i for i, s in enumerate(same_l) if len(s)]
            processed += len(batch)
            neg_processed += int(np.sum(batch >= n_pos))
            if not keep:
                continue
            batch = batch[keep]
            same_l = [same_l[i] for i in keep]
            diff_l = [diff_l[i] for i in keep]
            touched = np.unique(np.concatenate([batch, *same_l, *diff_l]))
            slot = {int(r): i for i, r in enumerate(touched)}

            def pad(lists):
                width = max(1, max(len(x) for x in lists))
                idx = np.zeros((len(lists), width), dtype=np.int64)
                m = np.zeros((len(lists), width), dtype=bool)
                for i, x in enumerate(lists):
                    idx[i, :len(x)] = [slot[int(r)] for r in x]
                    m[i, :len(x)] = True
                return idx, m

            S, Sm = pad(same_l)
            D, Dm = pad(diff_l)
            X = np.stack([dataset.bags[b].features[j] for b, j in refs[touched]])
            # relu-dead embeddings can hit zero mid-training; clamp instead of failing
            Z = project(params, encode(params, X), eps=NORM_EPS)
            anchors = np.array([slot[int(k)] for k in batch])
            loss = batched_supcon(Z, anchors, S, Sm, D, Dm, config.tau)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            steps += 1
        losses.append(epoch_loss / max(steps, 1))
    return FinetuneResult(params, processed, losses, neg_processed)
