import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hnmil.data import Bag
from hnmil.evaluation import MetricError, accuracy, auc, auprc, emit_heatmap, report, write_metrics


def pair_count_auc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@pytest.mark.parametrize("scores, labels, expected", [
    ([0.9, 0.1], [1, 0], 1.0),
    ([0.9, 0.9], [1, 0], 0.5),
    ([0.5], [0], 1.0),
])
def test_accuracy_examples(scores, labels, expected):
    assert accuracy(scores, labels) == expected


def test_accuracy_rejects_empty_and_mismatch():
    with pytest.raises(MetricError):
        accuracy([], [])
    with pytest.raises(MetricError):
        accuracy([0.1, 0.2], [1])


def test_auc_examples():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.3] * 5, [0, 1, 0, 1, 1]) == 0.5


def test_auc_single_class_is_undefined():
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 500).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]) | st.floats(0, 1), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_auc_equals_all_pairs_count(data):
    s, y = data
    if len(set(y)) < 2:
        return
    assert abs(auc(s, y) - pair_count_auc(s, y)) <= 1e-12


@settings(max_examples=50)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=40), st.integers(0, 2**31))
def test_auc_invariant_under_monotone_transform(s, seed):
    y = np.random.default_rng(seed).integers(0, 2, size=len(s))
    if len(set(y.tolist())) < 2:
        return
    s = np.asarray(s) / 10.0
    assert auc(np.exp(s) * 3 + 1, y) == auc(s, y)


def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert auprc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(1 * 0.5 + (2 / 3) * 0.5, abs=1e-15)
    assert auprc([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == pytest.approx(0.25, abs=1e-15)


def test_auprc_groups_ties():
    # both tied items enter together: precision 1/2 at recall 1
    assert auprc([0.5, 0.5], [1, 0]) == 0.5


def test_auprc_needs_a_positive():
    with pytest.raises(MetricError):
        auprc([0.2, 0.1], [0, 0])


def brute_auprc(s, y):
    total, n_pos, prev_tp = 0.0, sum(y), 0
    for t in sorted(set(s), reverse=True):
        sel = [l for a, l in zip(s, y) if a >= t]
        tp = sum(sel)
        total += (tp / len(sel)) * (tp - prev_tp) / n_pos
        prev_tp = tp
    return total


@settings(max_examples=100)
@given(st.lists(st.tuples(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.8]), st.integers(0, 1)), min_size=1, max_size=60))
def test_auprc_matches_threshold_sweep(pairs):
    s, y = zip(*pairs)
    if sum(y) == 0:
        return
    assert auprc(s, y) == pytest.approx(brute_auprc(s, y), abs=1e-12)


def test_report_with_and_without_truth(tmp_path):
    rep = report([0.9, 0.2], [1, 0], [np.array([0.8, 0.1]), np.array([0.3])], [np.array([1, 0]), np.array([0])])
    d = rep.to_dict()
    assert set(d) == {"instance.acc", "instance.auc", "instance.auprc", "bag.acc", "bag.auc", "counts"}
    assert d["instance.auc"] == 1.0 and d["bag.auc"] == 1.0
    bare = report([0.9, 0.2], [1, 0], [np.array([0.8, 0.1]), np.array([0.3])]).to_dict()
    assert "instance.auc" not in bare and bare["counts"]["instances"] == 3
    write_metrics(tmp_path / "m.json", d)
    assert json.loads((tmp_path / "m.json").read_text()) == d


def _grid_bag(scores_shape=(2, 3)):
    r, c = scores_shape
    coords = np.array([[i, j] for i in range(r) for j in range(c)])
    return Bag("g", 1, np.zeros((len(coords), 2)), coords=coords)


def _rows(path):
    return [line.split(",") for line in path.read_text().splitlines()[1:]]


def test_heatmap_all_zero_scores_invisible(tmp_path):
    csv_path, ppm_path = emit_heatmap(_grid_bag(), np.zeros(6), tmp_path / "h.csv")
    assert all(r[3] == "0" for r in _rows(csv_path))
    raw = ppm_path.read_bytes()
    assert raw.startswith(b"P6\n24 16\n255\n")
    assert set(raw[len(b"P6\n24 16\n255\n"):]) == {255}


def test_heatmap_boundary_value_is_visible(tmp_path):
    scores = np.array([0.3, np.nextafter(0.3, 0.0), 0.0, 1.0, 0.5, 0.2999])
    csv_path, _ = emit_heatmap(_grid_bag(), scores, tmp_path / "h.csv")
    assert [r[3] for r in _rows(csv_path)] == ["1", "0", "0", "1", "1", "0"]
    assert float(_rows(csv_path)[0][2]) == 0.3


def test_heatmap_single_cell(tmp_path):
    bag = Bag("s", 1, np.zeros((1, 2)), coords=np.array([[0, 0]]))
    csv_path, ppm_path = emit_heatmap(bag, [0.9], tmp_path / "s.csv", cell=1)
    assert _rows(csv_path) == [["0", "0", "0.9", "1"]]
    assert ppm_path.read_bytes()[-3:] == bytes([255, 25, 25])


def test_heatmap_requires_coords(tmp_path):
    with pytest.raises(MetricError):
        emit_heatmap(Bag("x", 1, np.zeros((2, 2))), [0.1, 0.2], tmp_path / "x.csv")
