"""Bags, datasets, the synthetic generator, manifest ingestion and splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .formats import FormatError, read_features, write_features

# instance kinds recorded by the synthetic generator
PLAIN_NEG, HARD_NEG, POSITIVE = 0, 1, 2


class ValidationError(ValueError):
    pass


class StratificationError(ValueError):
    pass


class Instance(NamedTuple):
    features: np.ndarray
    truth_label: Optional[int] = None
    coord: Optional[tuple[int, int]] = None


@dataclass(frozen=True, eq=False)
class Bag:
    """One labeled bag; instance ``j`` is row ``j`` of ``features``.

    ``truth`` (ground-truth instance labels) and ``kind`` exist only for
    synthetic or annotated data and are never read by training code.
    """

    id: str
    label: int
    features: np.ndarray
    truth: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None
    kind: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValidationError(f"bag {self.id}: label must be 0 or 1, got {self.label!r}")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValidationError(f"bag {self.id}: features must be (n>=1, d), got {self.features.shape}")
        n = self.features.shape[0]
        if self.truth is not None:
            if self.truth.shape != (n,):
                raise ValidationError(f"bag {self.id}: {self.truth.shape[0]} truth labels for {n} instances")
            if self.label == 0 and np.any(self.truth != 0):
                raise ValidationError(f"bag {self.id}: negative bag holds a positive instance")
        if self.coords is not None and self.coords.shape != (n, 2):
            raise ValidationError(f"bag {self.id}: coords shape {self.coords.shape} for {n} instances")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def instances(self) -> list[Instance]:
        out = []
        for j in range(len(self)):
            t = None if self.truth is None else int(self.truth[j])
            c = None if self.coords is None else (int(self.coords[j, 0]), int(self.coords[j, 1]))
            out.append(Instance(self.features[j], t, c))
        return out


@dataclass(frozen=True, eq=False)
class Dataset:
    bags: tuple[Bag, ...]
    d_in: int
    provenance: str = ""

    def __post_init__(self):
        if not self.bags:
            raise ValidationError("dataset has no bags")
        for b in self.bags:
            if b.features.shape[1] != self.d_in:
                raise ValidationError(f"bag {b.id}: feature dim {b.features.shape[1]} != d_in {self.d_in}")

    def __len__(self) -> int:
        return len(self.bags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    @property
    def has_truth(self) -> bool:
        return all(b.truth is not None for b in self.bags)

    @property
    def has_coords(self) -> bool:
        return all(b.coords is not None for b in self.bags)

    def n_instances(self, label: Optional[int] = None) -> int:
        return sum(len(b) for b in self.bags if label is None or b.label == label)

    def subset(self, indices: Sequence[int], tag: str = "") -> "Dataset":
        return Dataset(tuple(self.bags[i] for i in indices), self.d_in,
                       f"{self.provenance}[{tag}]" if tag else self.provenance)

    def require_both_classes(self, what: str = "dataset") -> None:
        labels = set(int(v) for v in self.labels)
        if labels != {0, 1}:
            raise StratificationError(f"{what} needs bags of both labels, found {sorted(labels)}")


@dataclass
class SyntheticSpec:
    """Knobs for the Gaussian-cluster bag generator.

    Positive bags hold a contiguous grid blob of ``ceil(witness_rate * n)``
    positives; every other instance, in either bag class, is a plain or hard
    negative. With ``hard_in_positive_bags=False`` hard negatives occur only in
    negative bags, which lets the bag-level stream separate classes by the
    hard-negative share alone. Plain negatives come from N(mu_neg, sigma^2 I), positives from
    N(mu_pos, sigma^2 I) and hard negatives from N(mu_hard, sigma^2 I) with
    ``mu_hard = (1 - alpha) mu_neg + alpha mu_pos``. If the means are not
    given, ``mu_neg = 0`` and ``mu_pos`` lies at distance ``mean_gap`` along
    the all-ones direction.
    """

    d_in: int = 32
    n_bags: int = 50
    n_pos_bags: Optional[int] = None
    n_neg_bags: Optional[int] = None
    min_instances: int = 50
    max_instances: int = 100
    witness_rate: float = 0.1
    hard_negative_fraction: float = 0.3
    alpha: float = 0.6
    sigma: float = 1.0
    mean_gap: float = 4.0
    mu_neg: Optional[list] = None
    mu_pos: Optional[list] = None
    grid_side: Optional[int] = None
    hard_in_positive_bags: bool = True
    seed: int = 0

    def validate(self) -> None:
        def bad(name, why):
            raise ValidationError(f"{name}: {why}")

        if self.d_in < 1:
            bad("d_in", "must be >= 1")
        for name in ("n_bags", "n_pos_bags", "n_neg_bags"):
            v = getattr(self, name)
            if v is not None and v < 1:
                bad(name, "must be >= 1")
        if self.min_instances < 1:
            bad("min_instances", "must be >= 1")
        if self.max_instances < self.min_instances:
            bad("max_instances", "must be >= min_instances")
        if not 0.0 < self.witness_rate <= 1.0:
            bad("witness_rate", "must lie in (0, 1]")
        if not 0.0 <= self.hard_negative_fraction < 1.0:
            bad("hard_negative_fraction", "must lie in [0, 1)")
        if not 0.0 <= self.alpha < 1.0:
            bad("alpha", "must lie in [0, 1)")
        if not self.sigma > 0.0:
            bad("sigma", "must be > 0")
        for name in ("mu_neg", "mu_pos"):
            v = getattr(self, name)
            if v is not None and len(v) != self.d_in:
                bad(name, f"length {len(v)} != d_in {self.d_in}")
        if self.grid_side is not None and self.grid_side ** 2 < self.max_instances:
            bad("grid_side", f"{self.grid_side}^2 cells cannot hold {self.max_instances} instances")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"{unknown[0]}: unknown synthetic spec field")
        return cls(**d)

    def means(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mu_n = np.zeros(self.d_in) if self.mu_neg is None else np.asarray(self.mu_neg, dtype=np.float64)
        if self.mu_pos is None:
            mu_p = mu_n + self.mean_gap / math.sqrt(self.d_in)
        else:
            mu_p = np.asarray(self.mu_pos, dtype=np.float64)
        mu_h = (1.0 - self.alpha) * mu_n + self.alpha * mu_p
        return mu_n, mu_p, mu_h


def _blob(coords: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``k`` cells nearest a random center: a contiguous patch."""
    center = coords[rng.integers(len(coords))]
    d2 = ((coords - center) ** 2).sum(axis=1)
    return np.sort(np.argsort(d2, kind="stable")[:k])


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    mu_n, mu_p, mu_h = spec.means()
    side = spec.grid_side or math.ceil(math.sqrt(spec.max_instances))
    n_pos = spec.n_pos_bags if spec.n_pos_bags is not None else spec.n_bags
    n_neg = spec.n_neg_bags if spec.n_neg_bags is not None else spec.n_bags

    bags = []
    for label, count in ((1, n_pos), (0, n_neg)):
        for b in range(count):
            n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
            cells = np.arange(n)
            coords = np.stack([cells // side, cells % side], axis=1).astype(np.int64)
            hard = rng.random(n) < spec.hard_negative_fraction
            kind = np.where(hard, HARD_NEG, PLAIN_NEG)
            if label == 1:
                if not spec.hard_in_positive_bags:
                    kind[:] = PLAIN_NEG
                kind[_blob(coords, math.ceil(spec.witness_rate * n), rng)] = POSITIVE
            centers = np.where((kind == POSITIVE)[:, None], mu_p,
                               np.where((kind == HARD_NEG)[:, None], mu_h, mu_n))
            x = centers + spec.sigma * rng.standard_normal((n, spec.d_in))
            # float32-representable so MILF round trips are exact
            x = x.astype(np.float32).astype(np.float64)
            bags.append(Bag(
                id=f"{'pos' if label else 'neg'}_{b:04d}", label=label, features=x,
                truth=(kind == POSITIVE).astype(np.int64), coords=coords, kind=kind,
            ))
    return Dataset(tuple(bags), spec.d_in, f"synthetic(seed={spec.seed})")


# manifest ingestion / emission

def _read_index_csv(path: Path, columns: tuple[str, ...], n: int) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("index",) + columns:
            raise FormatError(path, 0, f"expected header {','.join(('index',) + columns)}")
        out = np.full((n, len(columns)), -1, dtype=np.int64)
        for lineno, row in enumerate(reader, start=2):
            try:
                idx, *vals = (int(v) for v in row)
            except ValueError:
                raise FormatError(path, lineno, f"line {lineno}: non-integer field") from None
            if len(vals) != len(columns) or not 0 <= idx < n:
                raise FormatError(path, lineno, f"line {lineno}: bad row {row}")
            out[idx] = vals
    if np.any(out < 0):
        raise FormatError(path, 0, f"missing or negative rows (need indices 0..{n - 1})")
    return out


def load_features(manifest_path) -> Dataset:
    """Build a dataset from a JSON manifest of MILF feature files.

    Each manifest entry is ``{"id", "label", "features"}`` plus optional
    ``"coords"`` (CSV ``index,row,col``) and ``"truth"`` (CSV ``index,label``),
    paths relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        entries = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(manifest_path, exc.pos, f"invalid JSON: {exc.msg}") from None
    if not isinstance(entries, list) or not entries:
        raise ValidationError(f"{manifest_path}: manifest must be a nonempty JSON array")
    bags, d_in = [], None
    for i, e in enumerate(entries):
        for key in ("id", "label", "features"):
            if key not in e:
                raise ValidationError(f"{manifest_path}: entry {i} lacks '{key}'")
        if e["label"] not in (0, 1) or isinstance(e["label"], bool):
            raise ValidationError(f"{manifest_path}: entry {i} ({e['id']}): label must be 0 or 1, got {e['label']!r}")
        x = read_features(root / e["features"])
        if d_in is None:
            d_in = x.shape[1]
        elif x.shape[1] != d_in:
            raise FormatError(root / e["features"], 12, f"dim {x.shape[1]} differs from {d_in}")
        coords = _read_index_csv(root / e["coords"], ("row", "col"), len(x)) if e.get("coords") else None
        truth = _read_index_csv(root / e["truth"], ("label",), len(x))[:, 0] if e.get("truth") else None
        bags.append(Bag(str(e["id"]), int(e["label"]), x, truth=truth, coords=coords))
    return Dataset(tuple(bags), d_in, str(manifest_path))


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write MILF files (+ coords/truth CSVs) and ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for b in dataset.bags:
        entry = {"id": b.id, "label": b.label, "features": f"{b.id}.milf"}
        write_features(out_dir / entry["features"], b.features)
        if b.coords is not None:
            entry["coords"] = f"{b.id}.coords.csv"
            with open(out_dir / entry["coords"], "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["index", "row", "col"])
                w.writerows([j, int(r), int(c)] for j, (r, c) in enumerate(b.coords))
        if b.truth is not None:
            entry["truth"] = f"{b.id}.truth.csv"
            with open(out_dir / entry["truth"], "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["index", "label"])
                w.writerows([j, int(t)] for j, t in enumerate(b.truth))
        entries.append(entry)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(entries, indent=1) + "\n")
    return path


# splits

@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset
    indices: dict = field(default_factory=dict)


def split(dataset: Dataset, train_frac: float, val_frac: float, seed: int) -> Splits:
    """Stratified seeded train/val/test partition of bags."""
    if not (0 < train_frac < 1 and 0 < val_frac < 1) or train_frac + val_frac >= 1:
        raise ValidationError(f"fractions must lie in (0,1) with sum < 1 (got {train_frac}, {val_frac})")
    rng = np.random.default_rng(seed)
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    labels = dataset.labels
    for label in (0, 1):
        idx = np.flatnonzero(labels == label)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(math.floor(train_frac * len(idx)))
        n_va = int(math.floor(val_frac * len(idx)))
        parts["train"] += idx[:n_tr].tolist()
        parts["val"] += idx[n_tr:n_tr + n_va].tolist()
        parts["test"] += idx[n_tr + n_va:].tolist()
    for name, idx in parts.items():
        present = {int(labels[i]) for i in idx}
        if present != {0, 1}:
            raise StratificationError(f"{name} split has no bags of label {sorted({0, 1} - present)}")
        idx.sort()
    return Splits(*(dataset.subset(parts[n], n) for n in ("train", "val", "test")), indices=parts)


def kfold(dataset: Dataset, k: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Stratified k-fold (train, held-out) pairs."""
    if k < 2:
        raise ValidationError("k must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    labels = dataset.labels
    for label in (0, 1):
        idx = np.flatnonzero(labels == label)
        idx = idx[rng.permutation(len(idx))]
        for j, i in enumerate(idx):
            folds[j % k].append(int(i))
    out = []
    for f in range(k):
        held = sorted(folds[f])
        rest = sorted(i for g in range(k) if g != f for i in folds[g])
        if {int(labels[i]) for i in held} != {0, 1}:
            raise StratificationError(f"fold {f} lacks one class")
        out.append((dataset.subset(rest, f"fold{f}-train"), dataset.subset(held, f"fold{f}-test")))
    return out
