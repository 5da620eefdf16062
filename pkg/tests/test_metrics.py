import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memreg import metrics as M


def _one_hot(labels, c):
    return np.eye(c)[labels].transpose(0, 3, 1, 2)


def test_perfect_prediction():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 5, size=(2, 8, 8))
    acc = M.MetricAccumulator(5)
    acc.update(_one_hot(y, 5), _one_hot(y, 5), y)
    m = acc.result()
    assert m.fused_miou == m.aux_miou == m.primary_miou == 1.0
    assert m.disagreement_rate == 0.0


def test_disjoint_class_has_zero_iou():
    truth = np.array([[0, 0, 1, 1]])
    pred = np.array([[1, 1, 0, 0]])
    np.testing.assert_array_equal(M.per_class_iou(pred, truth, 2), [0.0, 0.0])


def test_half_coverage_gives_half_iou():
    # each true region is half covered by its own class and nothing else predicts it
    truth = np.array([[0, 0, 0, 0, 1, 1, 1, 1]])
    pred = np.array([[0, 0, 2, 2, 1, 1, 2, 2]])
    iou = M.per_class_iou(pred, truth, 3)
    np.testing.assert_allclose(iou[:2], [0.5, 0.5])


def test_absent_class_is_nan_and_skipped():
    iou = M.per_class_iou(np.zeros((2, 2), int), np.zeros((2, 2), int), 3)
    assert iou[0] == 1.0 and np.isnan(iou[1]) and np.isnan(iou[2])
    assert M.mean_iou(iou) == 1.0


def test_confusion_layout():
    conf = M.confusion_matrix(np.array([1, 1, 0]), np.array([0, 1, 1]), 2)
    np.testing.assert_array_equal(conf, [[0, 1], [1, 1]])


def test_label_range_checked():
    with pytest.raises(ValueError):
        M.confusion_matrix(np.array([0]), np.array([3]), 3)


def test_disagreement_rate():
    a = _one_hot(np.array([[[0, 1], [2, 2]]]), 3)
    p = _one_hot(np.array([[[0, 1], [1, 2]]]), 3)
    assert M.disagreement_rate(a, p) == 0.25


def test_fused_prediction_uses_weighted_sum():
    # primary prefers 0 weakly, aux prefers 1 strongly: 0.55+0.5*0.0=0.55 < 0.45+0.5*1.0
    p = np.array([0.55, 0.45])[None, :, None, None]
    a = np.array([0.0, 1.0])[None, :, None, None]
    acc = M.MetricAccumulator(2)
    acc.update(a, p, np.array([[[1]]]))
    m = acc.result()
    assert m.fused_miou == 1.0 and m.primary_miou == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_iou_bounds_and_mean(seed, c):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, c, size=(3, 5, 5))
    pred = rng.integers(0, c, size=(3, 5, 5))
    iou = M.per_class_iou(pred, truth, c)
    valid = iou[~np.isnan(iou)]
    assert np.all((valid >= 0) & (valid <= 1))
    assert M.mean_iou(iou) == pytest.approx(valid.mean())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_accumulation_matches_one_shot(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(4), size=(4, 6, 6)).transpose(0, 3, 1, 2)
    a = rng.dirichlet(np.ones(4), size=(4, 6, 6)).transpose(0, 3, 1, 2)
    y = rng.integers(0, 4, size=(4, 6, 6))
    whole = M.MetricAccumulator(4)
    whole.update(a, p, y)
    parts = M.MetricAccumulator(4)
    parts.update(a[:1], p[:1], y[:1])
    parts.update(a[1:], p[1:], y[1:])
    assert whole.result().summary() == parts.result().summary()
