"""Instance/bag metrics and score heatmaps.

AUC is the exact Mann-Whitney statistic (ties count one half). AUPRC is
the step-wise area: precision at each distinct score threshold weighted
by the recall gained there, with tied scores entering together.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _pair(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores vs {len(y)} labels")
    if len(s) == 0:
        raise MetricError("empty input")
    return s, y


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of items where ``score > threshold`` agrees with the label."""
    s, y = _pair(scores, labels)
    return float(np.mean((s > threshold).astype(np.int64) == y))


def auc(scores, labels) -> float:
    s, y = _pair(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined with a single class")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    s, y = _pair(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUPRC undefined without positives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last position of every group of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    precision = tp / (ends + 1.0)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * recall_gain))


@dataclass
class MetricReport:
    bag_acc: float
    bag_auc: Optional[float]
    n_bags: int
    instance_acc: Optional[float] = None
    instance_auc: Optional[float] = None
    instance_auprc: Optional[float] = None
    n_instances: int = 0

    def to_dict(self) -> dict:
        out = {}
        if self.instance_acc is not None:
            out["instance.acc"] = self.instance_acc
            out["instance.auc"] = self.instance_auc
            out["instance.auprc"] = self.instance_auprc
        out["bag.acc"] = self.bag_acc
        out["bag.auc"] = self.bag_auc
        out["counts"] = {"bags": self.n_bags, "instances": self.n_instances}
        return out


def report(bag_probs, bag_labels, inst_scores=None, inst_truth=None) -> MetricReport:
    bag_labels = np.asarray(bag_labels)
    both = len(set(bag_labels.tolist())) == 2
    rep = MetricReport(
        bag_acc=accuracy(bag_probs, bag_labels),
        bag_auc=auc(bag_probs, bag_labels) if both else None,
        n_bags=len(bag_labels),
    )
    if inst_scores is not None and inst_truth is not None:
        s = np.concatenate(inst_scores)
        t = np.concatenate(inst_truth)
        rep.n_instances = len(s)
        rep.instance_acc = accuracy(s, t)
        if 0 < t.sum() < len(t):
            rep.instance_auc = auc(s, t)
            rep.instance_auprc = auprc(s, t)
    elif inst_scores is not None:
        rep.n_instances = int(sum(len(v) for v in inst_scores))
    return rep


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def _ramp(score: float) -> tuple[int, int, int]:
    fade = int(round(255 * (1.0 - min(max(score, 0.0), 1.0))))
    return 255, fade, fade


def emit_heatmap(bag, scores, out_path, alpha_threshold: float = 0.3, cell: int = 8) -> tuple[Path, Path]:
    """Write ``row,col,score,visible`` CSV and a P6 PPM beside it.

    Cells scoring below ``alpha_threshold`` are invisible (rendered as the
    white background, like empty grid cells).
    """
    if bag.coords is None:
        raise MetricError(f"bag {bag.id} has no coordinates")
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(bag):
        raise MetricError(f"{len(scores)} scores for {len(bag)} instances")
    csv_path = Path(out_path)
    ppm_path = csv_path.with_suffix(".ppm")
    visible = scores >= alpha_threshold
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "score", "visible"])
        for (r, c), s, v in zip(bag.coords, scores, visible):
            w.writerow([int(r), int(c), repr(float(s)), int(v)])
    rows = int(bag.coords[:, 0].max()) + 1
    cols = int(bag.coords[:, 1].max()) + 1
    img = np.full((rows, cols, 3), 255, dtype=np.uint8)
    for (r, c), s, v in zip(bag.coords, scores, visible):
        if v:
            img[r, c] = _ramp(s)
    img = np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)
    with open(ppm_path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return csv_path, ppm_path
