"""Command-line entry point: ``hnmil gen-data | train | evaluate | ablate``.

Exit codes: 0 on success, 2 on invalid input (bad config, missing or
malformed files), 1 when the pipeline itself fails.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import sys
import time
from pathlib import Path

import click

from .config import TrainConfig
from .data import (Dataset, Splits, StratificationError, SyntheticSpec, ValidationError,
                   generate_synthetic, load_features, save_dataset)
from .evaluation import emit_heatmap, write_metrics
from .formats import FormatError
from .selftrain import ModelState, RunResult, evaluate_split, run, score_bags
from .encoder import embed_array

NEGATIVE_RATIOS = (0.02, 0.05, 0.10, 0.20, 1.00)
RANKING_WEIGHTS = (0.0, 0.1)
ABLATION_COLUMNS = ["ratio", "bag_acc", "bag_auc", "instance_auc", "finetune_instances", "seconds", "seed"]


class _Invalid(click.ClickException):
    exit_code = 2


def _guarded(fn):
    """Map library exceptions onto exit codes 2 (input) and 1 (runtime)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValidationError, StratificationError, FormatError, FileNotFoundError) as exc:
            raise _Invalid(str(exc)) from exc
        except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


def _read_json(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: expected a JSON object")
    return raw


def _config(path, seed) -> TrainConfig:
    raw = _read_json(path) if path else {}
    if seed is not None:
        raw["seed"] = seed
    return TrainConfig.from_dict(raw)


def _dataset(data_dir) -> Dataset:
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest}: no such file")
    return load_features(manifest)


def _splits_from(dataset: Dataset, indices: dict) -> Splits:
    return Splits(*(dataset.subset(indices[n], n) for n in ("train", "val", "test")),
                  indices={n: list(indices[n]) for n in ("train", "val", "test")})


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Self-training MIL with hard negative mining."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("gen-data")
@click.option("--config", "spec_file", type=click.Path(dir_okay=False), help="Synthetic spec JSON.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the spec's seed.")
@_guarded
def gen_data(spec_file, out_dir, seed) -> None:
    """Generate a synthetic MIL dataset (MILF files + manifest.json)."""
    raw = _read_json(spec_file) if spec_file else {}
    if seed is not None:
        raw["seed"] = seed
    spec = SyntheticSpec.from_dict(raw)
    spec.validate()
    manifest = save_dataset(generate_synthetic(spec), out_dir)
    click.echo(str(manifest))


def _write_run_json(out: Path, config: TrainConfig, data_dir, result: RunResult) -> None:
    doc = {"config": config.to_dict(), "seed": config.seed, "data": str(Path(data_dir).resolve()),
           "splits": {n: [int(i) for i in result.splits.indices[n]] for n in ("train", "val", "test")}}
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


@main.command()
@click.option("--config", "config_file", type=click.Path(dir_okay=False), help="TrainConfig JSON; omitted fields take defaults.")
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config's master seed.")
@_guarded
def train(config_file, data_dir, out_dir, seed) -> None:
    """Run the self-training loop and write a run directory."""
    config = _config(config_file, seed)
    dataset = _dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run(dataset, config, out_dir=out)
    _write_run_json(out, config, data_dir, result)
    click.echo(json.dumps(result.final_report["test"], sort_keys=True))


@main.command()
@click.option("--run", "run_dir", type=click.Path(file_okay=False), required=True)
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False), default=None, help="Overrides the data path in run.json.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Metrics JSON (default RUN/eval_<split>.json).")
@click.option("--heatmaps", is_flag=True, help="Write a CSV+PPM heatmap per positive bag.")
@_guarded
def evaluate(run_dir, split_name, data_dir, out_path, heatmaps) -> None:
    """Score a split with a run's final model."""
    run_dir = Path(run_dir)
    if not (run_dir / "run.json").is_file():
        raise FileNotFoundError(f"{run_dir / 'run.json'}: no such file")
    doc = _read_json(run_dir / "run.json")
    dataset = _dataset(data_dir or doc["data"])
    part = getattr(_splits_from(dataset, doc["splits"]), split_name)
    model = ModelState.load(run_dir / "final" / "model.milc")
    emb = [embed_array(model.encoder, b.features) for b in part.bags]
    rep = evaluate_split(model.aggregator, emb, part)
    out = Path(out_path) if out_path else run_dir / f"eval_{split_name}.json"
    write_metrics(out, rep.to_dict())
    if heatmaps:
        if not part.has_coords:
            raise ValidationError(f"{split_name} split has no coordinates for heatmaps")
        hm_dir = run_dir / "heatmaps"
        hm_dir.mkdir(exist_ok=True)
        inst, _ = score_bags(model.aggregator, emb)
        for bag, s in zip(part.bags, inst):
            if bag.label == 1:
                emit_heatmap(bag, s, hm_dir / f"{bag.id}.csv")
    click.echo(json.dumps(rep.to_dict(), sort_keys=True))


def _arm_row(key, result: RunResult, seconds: float, seed: int) -> list:
    last = result.records[-1].test
    inst = last.get("instance.auc")
    return [key, last["bag.acc"], last["bag.auc"], "" if inst is None else inst,
            sum(r.finetune_instances for r in result.records), round(seconds, 3), seed]


def ablation_rows(dataset: Dataset, config: TrainConfig, mode: str) -> tuple[list[str], list[list]]:
    """Run every arm of an ablation; metrics come from the last iteration's test split."""
    if mode == "negatives":
        field, values = "r_n", NEGATIVE_RATIOS
        header = ABLATION_COLUMNS
    elif mode == "ranking":
        field, values = "w_r", RANKING_WEIGHTS
        header = ["w_r"] + ABLATION_COLUMNS[1:]
    else:
        raise ValidationError(f"mode: unknown ablation mode {mode!r}")
    seeds = config.ablation_seeds or [config.seed]
    rows = []
    for seed in seeds:
        for v in values:
            arm = TrainConfig.from_dict(dict(config.to_dict(), seed=int(seed), **{field: v}))
            t0 = time.monotonic()
            result = run(dataset, arm)
            rows.append(_arm_row(v, result, time.monotonic() - t0, int(seed)))
    return header, rows


@main.command()
@click.option("--config", "config_file", type=click.Path(dir_okay=False))
@click.option("--data", "data_dir", type=click.Path(file_okay=False), required=True)
@click.option("--mode", type=click.Choice(["negatives", "ranking"]), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="CSV path (default stdout).")
@click.option("--seed", type=int, default=None, help="Single seed instead of the config's ablation_seeds.")
@_guarded
def ablate(config_file, data_dir, mode, out_path, seed) -> None:
    """Negative-ratio sweep or ranking-loss on/off, paired on seeds."""
    config = _config(config_file, seed)
    if seed is not None:
        config.ablation_seeds = None
    header, rows = ablation_rows(_dataset(data_dir), config, mode)
    fh = open(out_path, "w", newline="") if out_path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if out_path:
            fh.close()


if __name__ == "__main__":
    main()
