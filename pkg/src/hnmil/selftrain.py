"""The self-training loop: aggregator -> pseudo labels -> banks -> encoder
fine-tuning -> re-embedding, repeated."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .aggregator import (AggregatorParams, bag_predict, init_aggregator, instance_scores,
                         train_aggregator, write_history)
from .config import TrainConfig
from .contrastive import PseudoLabelTable, build_banks, finetune_encoder, label_table
from .data import Dataset, Splits, split
from .encoder import EncoderParams, embed_array, init_encoder
from .evaluation import MetricReport, report, write_metrics
from .formats import read_checkpoint, write_checkpoint
from .numerics import Tensor

log = logging.getLogger(__name__)

# phase tags for seed derivation
_ENC_INIT, _AGG_INIT, _AGG_TRAIN, _FINETUNE, _SPLIT = range(5)


class PhaseError(RuntimeError):
    def __init__(self, iteration: int, phase: str, cause: BaseException):
        self.iteration, self.phase = iteration, phase
        super().__init__(f"iteration {iteration}, phase {phase}: {cause}")


def derive_seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([master, *tags]).generate_state(1)[0])


@dataclass
class ModelState:
    encoder: EncoderParams
    aggregator: AggregatorParams

    def save(self, path) -> None:
        write_checkpoint(path, {"encoder": self.encoder.arch(), "aggregator": {"embed_dim": self.aggregator.embed_dim}},
                         {"encoder": self.encoder.state(), "aggregator": self.aggregator.state()})

    @classmethod
    def load(cls, path) -> "ModelState":
        arch, sections = read_checkpoint(path)
        return cls(EncoderParams.from_state(arch["encoder"], sections["encoder"]),
                   AggregatorParams.from_state(sections["aggregator"]))

    def copy(self) -> "ModelState":
        return ModelState(self.encoder.copy(), self.aggregator.copy())


class Embeddings:
    """Per-bag embeddings tagged with the encoder version that produced them."""

    def __init__(self, encoder: EncoderParams, dataset: Dataset, version: int):
        self.version = version
        self.arrays = [embed_array(encoder, b.features) for b in dataset.bags]


def score_bags(aggregator: AggregatorParams, embeddings: list[np.ndarray]):
    """Instance scores and bag probabilities, inference only."""
    inst, probs = [], []
    for H in embeddings:
        fwd = bag_predict(aggregator, Tensor(H))
        inst.append(fwd.scores.data)
        probs.append(fwd.prob.item())
    return inst, np.array(probs)


def evaluate_split(aggregator: AggregatorParams, embeddings: list[np.ndarray], dataset: Dataset) -> MetricReport:
    inst, probs = score_bags(aggregator, embeddings)
    truth = [b.truth for b in dataset.bags] if dataset.has_truth else None
    return report(probs, dataset.labels, inst, truth)


def assign_pseudo_labels(encoder: EncoderParams, aggregator: AggregatorParams, dataset: Dataset,
                         threshold: float, embeddings: Optional[list[np.ndarray]] = None) -> PseudoLabelTable:
    """Score every instance; positive-bag instances get 1 iff score > threshold."""
    if embeddings is None:
        embeddings = [embed_array(encoder, b.features) for b in dataset.bags]
    scores = [instance_scores(aggregator, Tensor(H)).data for H in embeddings]
    return label_table(dataset, scores, threshold)


@dataclass
class IterationRecord:
    iteration: int
    history: list
    bank_sizes: dict
    val: dict
    test: dict
    seconds: dict
    finetune_instances: int = 0
    finetune_negatives: int = 0
    skipped_finetune: bool = False
    embedding_version: int = 0

    def metrics(self) -> dict:
        """Deterministic part of the record (no timings)."""
        d = asdict(self)
        d.pop("seconds")
        d.pop("history")
        d["final_loss"] = self.history[-1][2] if self.history else None
        return d


@dataclass
class RunResult:
    records: list
    final: ModelState
    best_iteration: int
    splits: Splits
    final_report: dict = field(default_factory=dict)


def run(dataset: Dataset, config: TrainConfig, splits: Optional[Splits] = None,
        out_dir=None) -> RunResult:
    """Execute the whole loop. With ``out_dir`` set, artifacts are written
    per iteration under ``iter_k/`` plus ``final/``."""
    config.validate()
    seed = config.seed
    if splits is None:
        splits = split(dataset, config.train_frac, config.val_frac, derive_seed(seed, _SPLIT))
    splits.train.require_both_classes("training split")
    out = Path(out_dir) if out_dir is not None else None

    encoder = init_encoder(dataset.d_in, list(config.hidden), config.embed_dim, config.proj_dim,
                           derive_seed(seed, _ENC_INIT), config.normalize_projection)
    version = 0
    emb = {name: Embeddings(encoder, getattr(splits, name), version) for name in ("train", "val", "test")}
    aggregator: Optional[AggregatorParams] = None
    records: list[IterationRecord] = []
    best: tuple[float, int, Optional[ModelState]] = (-np.inf, -1, None)

    for it in range(config.iterations + 1):
        seconds: dict[str, float] = {}
        bank_sizes: dict = {}
        ft_count, ft_neg, skipped = 0, 0, False
        iter_dir = None
        if out is not None:
            iter_dir = out / f"iter_{it}"
            iter_dir.mkdir(parents=True, exist_ok=True)

        if it > 0:
            phase = "pseudo_label"
            try:
                t0 = time.monotonic()
                table = assign_pseudo_labels(encoder, aggregator, splits.train, config.threshold,
                                             emb["train"].arrays)
                seconds[phase] = time.monotonic() - t0
                phase = "banks"
                banks = build_banks(table, config.r_p, config.r_n, config.threshold, config.pos_cap_basis)
                bank_sizes = {"pos": int(len(banks.pos)), "neg": int(len(banks.neg))}
                if iter_dir is not None:
                    table.write_csv(iter_dir / "pseudo_labels.csv")
                    banks.write(iter_dir / "banks.csv", iter_dir / "banks.json")
                phase = "finetune"
                t0 = time.monotonic()
                if banks.skip:
                    skipped = True
                    log.info("iteration %d: empty bank, fine-tuning skipped", it)
                else:
                    res = finetune_encoder(encoder, splits.train, banks, config, derive_seed(seed, _FINETUNE, it))
                    encoder, ft_count, ft_neg = res.params, res.instances_processed, res.negatives_processed
                seconds[phase] = time.monotonic() - t0
                phase = "reembed"
                t0 = time.monotonic()
                if not skipped:
                    version += 1
                    emb = {name: Embeddings(encoder, getattr(splits, name), version)
                           for name in ("train", "val", "test")}
                seconds[phase] = time.monotonic() - t0
            except Exception as exc:
                raise PhaseError(it, phase, exc) from exc

        try:
            t0 = time.monotonic()
            if aggregator is None or not config.warm_start:
                aggregator = init_aggregator(config.embed_dim, config.query_dim, derive_seed(seed, _AGG_INIT, it))
            assert emb["train"].version == version, "aggregator would train on stale embeddings"
            aggregator, history = train_aggregator(splits.train, encoder, aggregator, config,
                                                   derive_seed(seed, _AGG_TRAIN, it), emb["train"].arrays)
            seconds["aggregator"] = time.monotonic() - t0
            val_rep = evaluate_split(aggregator, emb["val"].arrays, splits.val)
            test_rep = evaluate_split(aggregator, emb["test"].arrays, splits.test)
        except Exception as exc:
            raise PhaseError(it, "aggregator", exc) from exc

        rec = IterationRecord(it, [tuple(map(float, h)) for h in history], bank_sizes,
                              val_rep.to_dict(), test_rep.to_dict(), seconds, ft_count, ft_neg, skipped, version)
        records.append(rec)
        log.info("iteration %d: val bag auc %s, test instance auc %s", it,
                 rec.val["bag.auc"], rec.test.get("instance.auc"))

        state = ModelState(encoder, aggregator)
        score = val_rep.bag_auc if val_rep.bag_auc is not None else val_rep.bag_acc
        if not config.early_stop or score > best[0]:
            best = (score, it, state.copy())
        if iter_dir is not None:
            state.save(iter_dir / "model.milc")
            write_history(iter_dir / "history.csv", rec.history)
            write_metrics(iter_dir / "metrics.json", rec.metrics())
            (iter_dir / "timing.json").write_text(json.dumps(seconds, indent=2, sort_keys=True) + "\n")

    _, best_it, final = best
    result = RunResult(records, final, best_it, splits, {"best_iteration": best_it,
                                                         "val": records[best_it].val,
                                                         "test": records[best_it].test})
    if out is not None:
        (out / "final").mkdir(exist_ok=True)
        final.save(out / "final" / "model.milc")
        write_metrics(out / "final" / "metrics.json", result.final_report)
    return result
