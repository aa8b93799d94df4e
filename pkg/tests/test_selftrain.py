import json
import math

import numpy as np
import pytest

from hnmil import selftrain
from hnmil.config import TrainConfig
from hnmil.data import SyntheticSpec, generate_synthetic
from hnmil.encoder import init_encoder
from hnmil.aggregator import init_aggregator
from hnmil.selftrain import ModelState, PhaseError, assign_pseudo_labels, run


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(SyntheticSpec(d_in=8, n_bags=10, min_instances=15, max_instances=25,
                                            mean_gap=6.0, seed=4))


def quick(**kw):
    base = dict(agg_epochs=3, ft_epochs=1, lr=1e-3, iterations=2, hidden=[8], embed_dim=6,
                proj_dim=4, query_dim=4, r_n=0.2, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_gives_baseline_only(dataset):
    res = run(dataset, quick(iterations=0))
    assert len(res.records) == 1
    assert res.records[0].bank_sizes == {} and res.records[0].finetune_instances == 0


def test_record_count_and_embedding_versions(dataset):
    res = run(dataset, quick(iterations=3, threshold=0.0))
    assert [r.iteration for r in res.records] == [0, 1, 2, 3]
    assert [r.embedding_version for r in res.records] == [0, 1, 2, 3]


def test_same_seed_same_records(dataset):
    a = run(dataset, quick())
    b = run(dataset, quick())
    assert [r.metrics() for r in a.records] == [r.metrics() for r in b.records]
    assert [r.history for r in a.records] == [r.history for r in b.records]


def test_fine_tune_counts_respect_bank_sizes(dataset):
    cfg = quick(r_n=0.05, threshold=0.0, ft_epochs=2)
    res = run(dataset, cfg)
    n_neg = res.splits.train.n_instances(0)
    for r in res.records[1:]:
        assert r.finetune_instances <= (r.bank_sizes["pos"] + r.bank_sizes["neg"]) * cfg.ft_epochs
        assert r.bank_sizes["neg"] == math.ceil(0.05 * n_neg)
        assert r.finetune_negatives == r.bank_sizes["neg"] * cfg.ft_epochs


def test_empty_positive_bank_skips_fine_tuning(dataset):
    res = run(dataset, quick(threshold=0.999999))
    for r in res.records[1:]:
        assert r.skipped_finetune and r.bank_sizes["pos"] == 0
        assert r.finetune_instances == 0 and r.embedding_version == 0


def test_negative_bags_always_pseudo_label_zero(dataset):
    enc = init_encoder(8, [8], 6, 4, seed=0)
    agg = init_aggregator(6, 4, seed=0)
    agg.b_ins.data = np.array(50.0)  # every score ~1
    table = assign_pseudo_labels(enc, agg, dataset, 0.3)
    assert np.all(table.pseudo_label[~table.from_positive] == 0)
    assert np.all(table.pseudo_label[table.from_positive] == 1)


def test_phase_errors_are_tagged(dataset, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setattr(selftrain, "finetune_encoder", boom)
    with pytest.raises(PhaseError) as err:
        run(dataset, quick(threshold=0.0))
    assert (err.value.iteration, err.value.phase) == (1, "finetune")
    assert "kaput" in str(err.value)


def test_run_directory_layout(dataset, tmp_path):
    res = run(dataset, quick(iterations=1, threshold=0.0), out_dir=tmp_path)
    for k in (0, 1):
        for name in ("model.milc", "history.csv", "metrics.json", "timing.json"):
            assert (tmp_path / f"iter_{k}" / name).is_file()
    for name in ("pseudo_labels.csv", "banks.csv", "banks.json"):
        assert (tmp_path / "iter_1" / name).is_file()
    final = json.loads((tmp_path / "final" / "metrics.json").read_text())
    assert final["best_iteration"] == res.best_iteration
    metrics = json.loads((tmp_path / "iter_1" / "metrics.json").read_text())
    assert "seconds" not in metrics and "instance.auc" in metrics["test"]


def test_model_state_round_trip(dataset, tmp_path):
    res = run(dataset, quick(iterations=0))
    res.final.save(tmp_path / "m.milc")
    back = ModelState.load(tmp_path / "m.milc")
    for a, b in zip(res.final.encoder.parameters() + res.final.aggregator.parameters(),
                    back.encoder.parameters() + back.aggregator.parameters()):
        assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(back.aggregator.center, res.final.aggregator.center)


def test_early_stop_keeps_best_validation_iteration(dataset):
    res = run(dataset, quick(iterations=3, threshold=0.0))
    val = [r.val["bag.auc"] for r in res.records]
    assert res.best_iteration == int(np.argmax(val))
    last = run(dataset, quick(iterations=3, threshold=0.0, early_stop=False))
    assert last.best_iteration == 3
