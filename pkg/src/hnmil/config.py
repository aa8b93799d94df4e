"""Training configuration with the published defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import ValidationError


@dataclass
class TrainConfig:
    # ranking loss / combined objective
    K: int = 10
    w_b: float = 0.5
    w_r: float = 0.1
    # bank construction
    r_p: float = 0.2
    r_n: float = 0.05
    threshold: float = 0.3
    pos_cap_basis: str = "above_threshold"
    # contrastive fine-tuning
    tau: float = 0.5
    n_same: int = 8
    n_diff: int = 8
    ft_batch_size: int = 32
    normalize_projection: bool = True
    # optimisation
    agg_epochs: int = 350
    ft_epochs: int = 25
    lr: float = 1e-4
    ft_lr: Optional[float] = None
    standardize: bool = True
    # loop
    iterations: int = 5
    warm_start: bool = False
    early_stop: bool = True
    seed: int = 0
    ablation_seeds: Optional[list] = None
    train_frac: float = 0.6
    val_frac: float = 0.2
    # architecture
    hidden: list = field(default_factory=lambda: [64])
    embed_dim: int = 32
    proj_dim: int = 16
    query_dim: int = 16

    @property
    def finetune_lr(self) -> float:
        return self.lr if self.ft_lr is None else self.ft_lr

    def validate(self) -> "TrainConfig":
        def bad(name, why):
            raise ValidationError(f"{name}: {why}")

        if self.K < 1:
            bad("K", "must be >= 1")
        for name in ("w_b", "w_r"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        for name in ("r_p", "r_n"):
            if not 0 < getattr(self, name) <= 1:
                bad(name, "must lie in (0, 1]")
        if not 0 <= self.threshold < 1:
            bad("threshold", "must lie in [0, 1)")
        if self.pos_cap_basis not in ("positive_bag", "above_threshold"):
            bad("pos_cap_basis", "must be 'positive_bag' or 'above_threshold'")
        if self.tau <= 0:
            bad("tau", "must be > 0")
        for name in ("n_same", "n_diff", "ft_batch_size", "embed_dim", "proj_dim", "query_dim"):
            if getattr(self, name) < 1:
                bad(name, "must be >= 1")
        if self.embed_dim < 2:
            bad("embed_dim", "must be >= 2")
        for name in ("agg_epochs", "ft_epochs", "iterations"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if self.lr <= 0 or (self.ft_lr is not None and self.ft_lr <= 0):
            bad("lr", "must be > 0")
        if not (0 < self.train_frac < 1 and 0 < self.val_frac < 1 and self.train_frac + self.val_frac < 1):
            bad("train_frac", "train_frac and val_frac must lie in (0,1) with sum < 1")
        if any(int(h) < 1 for h in self.hidden):
            bad("hidden", "layer widths must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValidationError(f"{unknown[0]}: unknown config field")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_dict(raw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
