import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from crystalmt.metrics import (
    UndefinedMetricError,
    average_ranks,
    classify_metal,
    improvement_pct,
    mae,
    pearson,
    report_from_arrays,
    roc_auc,
    spearman,
)
from crystalmt.training import Normalizer
from oracles import explicit_average_ranks, pairwise_auc, plain_pearson


def test_mae_examples():
    y = np.array([1.0, 2.0, 3.0])
    assert mae(y, y) == 0.0
    assert mae(y + np.array([1, -1, 1]), y) == 1.0
    norm = Normalizer(np.array([0.0]), np.array([2.0]))
    raw = norm.denormalize(np.array([[0.5], [-0.5]]))
    assert mae(raw, np.zeros(2)) == 1.0
    with pytest.raises(ValueError):
        mae([1.0, 2.0], [1.0])


@given(arrays(np.float64, 8, elements=st.floats(-100, 100)), st.floats(-100, 100))
def test_mae_translation_invariant(x, c):
    y = x[::-1].copy()
    assert mae(x + c, y + c) == pytest.approx(mae(x, y), abs=1e-9)


def test_pearson_examples():
    x = np.array([1.0, 2.0, 4.0, 7.0])
    assert pearson(x, 2 * x) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        pearson(np.ones(4), x)


def test_pearson_matches_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 40))
        x, y = rng.normal(size=n), rng.normal(size=n)
        assert pearson(x, y) == pytest.approx(plain_pearson(x, y), abs=1e-12)


@settings(max_examples=50)
@given(st.floats(0.1, 10) | st.floats(-10, -0.1), st.floats(-5, 5))
def test_pearson_affine_sign(a, b):
    x = np.random.default_rng(0).normal(size=10)
    assert pearson(x, a * x + b) == pytest.approx(np.sign(a), abs=1e-12)


def test_spearman_examples():
    x = np.array([-2.0, -0.5, 0.1, 1.0, 3.0])
    assert spearman(x, x**3) == pytest.approx(1.0, abs=1e-15)
    assert spearman(x, -x) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        spearman(np.zeros(3), x[:3])


def test_spearman_with_ties_matches_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(3, 30))
        x = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 5, size=n).astype(float)
        if np.all(x == x[0]) or np.all(y == y[0]):
            continue
        ranks_x, ranks_y = explicit_average_ranks(x), explicit_average_ranks(y)
        assert np.array_equal(average_ranks(x), ranks_x)
        assert spearman(x, y) == pytest.approx(plain_pearson(ranks_x, ranks_y), abs=1e-12)


def test_spearman_monotone_invariance(rng):
    x, y = rng.normal(size=30), rng.normal(size=30)
    base = spearman(x, y)
    assert abs(spearman(np.exp(x), y) - base) < 1e-12
    assert abs(spearman(x, y**3) - base) < 1e-12


def test_classify_metal():
    assert classify_metal(0.0) == "metal"
    assert classify_metal(0.025) == "non-metal"
    assert classify_metal(0.0249999) == "metal"
    assert classify_metal(1.1) == "non-metal"


def test_roc_auc_examples():
    labels = np.array([0, 0, 1, 1])
    assert roc_auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
    assert roc_auc([0.5] * 4, labels) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_matches_pairwise_oracle(rng):
    for _ in range(100):
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        scores = np.round(rng.normal(size=50), 1)  # rounding forces ties
        assert roc_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_roc_auc_transform_and_flip(rng):
    labels = rng.integers(0, 2, size=40)
    labels[:2] = [0, 1]
    s = rng.normal(size=40)
    a = roc_auc(s, labels)
    assert roc_auc(np.exp(s), labels) == a
    assert a + roc_auc(-s, labels) == pytest.approx(1.0, abs=1e-15)


def test_improvement():
    assert round(improvement_pct(0.181, 0.166), 1) == 8.3


def test_report():
    rng = np.random.default_rng(0)
    y = np.column_stack([rng.normal(size=20), rng.uniform(0, 3, size=20)])
    y[:5, 1] = 0.0
    pred = y + rng.normal(scale=0.1, size=y.shape)
    rep = report_from_arrays(pred, y, ["e", "gap"], band_gap_task="gap", baseline_avg_mae=1.0)
    assert rep.avg_mae == pytest.approx(np.mean(list(rep.mae.values())), abs=0)
    assert 0 <= rep.auc <= 1
    assert -1 <= rep.pearson["e|gap"] <= 1
    assert rep.improvement_pct == pytest.approx(100 * (1 - rep.avg_mae))
    doc = json.loads(rep.to_json())
    assert doc["auc_convention"].startswith("positive=non-metal")
    head, row = rep.to_csv_row().splitlines()
    assert head.split(",")[:3] == ["split", "n", "mae_e"]


def test_report_records_undefined_metrics():
    y = np.array([[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]])
    rep = report_from_arrays(y, y, ["a", "b"], band_gap_task="b")
    assert rep.pearson["a|b"] is None and rep.spearman["a"] is None
    assert rep.auc is None
    assert len(rep.notes) == 3
