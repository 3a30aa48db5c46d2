import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phenocd import metrics
from phenocd.errors import ValidationError
from phenocd.verify import oracle_metrics

CM = metrics.ConfusionMatrix


def test_worked_example():
    rep = metrics.compute(CM(tp=50, tn=0, fp=10, fn=15))
    assert round(rep.precision, 5) == 0.83333
    assert round(rep.recall, 5) == 0.76923
    assert round(rep.f1, 5) == 0.80000
    assert round(rep.iou, 5) == 0.66667


def test_two_by_two_enumeration():
    cm = metrics.accumulate(CM(), np.array([[1, 0], [1, 1]]), np.array([[1, 1], [0, 1]]))
    assert (cm.tp, cm.fn, cm.fp, cm.tn) == (2, 1, 1, 0)


def test_identity_and_inversion():
    gt = np.random.default_rng(0).integers(0, 2, (16, 16))
    cm = metrics.accumulate(CM(), gt, gt)
    assert cm.fp == cm.fn == 0 and cm.tp + cm.tn == 256
    cm = metrics.accumulate(CM(), 1 - gt, gt)
    assert cm.tp == cm.tn == 0


def test_all_ones_vs_all_zeros():
    cm = metrics.accumulate(CM(), np.ones((64, 64)), np.zeros((64, 64)))
    assert (cm.tp, cm.tn, cm.fp, cm.fn) == (0, 0, 4096, 0)


def test_degenerate_cases():
    zero = metrics.compute(CM())
    assert (zero.precision, zero.recall, zero.f1, zero.iou) == (0.0, 0.0, 0.0, 0.0)
    perfect = metrics.compute(CM(tp=7, tn=3))
    assert (perfect.precision, perfect.recall, perfect.f1, perfect.iou) == (1.0, 1.0, 1.0, 1.0)


def test_non_binary_and_shape_errors():
    with pytest.raises(ValidationError):
        metrics.accumulate(CM(), np.array([[2, 0]]), np.array([[1, 0]]))
    with pytest.raises(ValidationError):
        metrics.accumulate(CM(), np.zeros((2, 2)), np.zeros((2, 3)))


def test_negative_counters_rejected():
    with pytest.raises(ValueError):
        CM(tp=-1)


@settings(max_examples=200, deadline=None)
@given(tp=st.integers(0, 10**6), tn=st.integers(0, 10**6), fp=st.integers(0, 10**6), fn=st.integers(0, 10**6))
def test_f1_iou_identity(tp, tn, fp, fn):
    rep = metrics.compute(CM(tp, tn, fp, fn))
    assert rep.iou <= rep.f1 <= 1.0
    assert abs(rep.f1 - 2 * rep.iou / (1 + rep.iou)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), parts=st.integers(1, 5))
def test_accumulation_order_free_and_additive(seed, parts):
    rng = np.random.default_rng(seed)
    maps = [(rng.integers(0, 2, (8, 8)), rng.integers(0, 2, (8, 8))) for _ in range(parts)]
    fwd = CM()
    for p, g in maps:
        fwd = metrics.accumulate(fwd, p, g)
    rev = CM()
    for p, g in reversed(maps):
        rev = metrics.accumulate(rev, p, g)
    summed = CM()
    for p, g in maps:
        summed = summed + metrics.accumulate(CM(), p, g)
    assert fwd == rev == summed
    assert fwd.total == 64 * parts


def test_matches_oracle_on_random_maps():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, gt = rng.integers(0, 2, (64, 64)), rng.integers(0, 2, (64, 64))
        cm = metrics.accumulate(CM(), pred, gt)
        ref = oracle_metrics(pred, gt)
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (ref["tp"], ref["tn"], ref["fp"], ref["fn"])


def test_json_layout():
    text = metrics.compute(CM(tp=50, tn=5, fp=10, fn=15), "test", "stage3/ckpt-best").to_json()
    data = json.loads(text)
    assert list(data)[:5] == ["precision", "recall", "f1", "iou", "confusion"]
    assert data["confusion"] == {"tp": 50, "tn": 5, "fp": 10, "fn": 15}
    assert '"precision": 0.833333' in text and '"iou": 0.666667' in text
    assert data["split"] == "test"
