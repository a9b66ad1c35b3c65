import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import confusion_direct

from rednet.errors import ShapeError
from rednet.metrics import ConfusionMatrix, metrics, predict_labels, report
from rednet.tensor import Tensor


def test_perfect_prediction():
    cm = ConfusionMatrix(3)
    gt = np.array([[1, 2], [3, 1]])
    cm.accumulate(gt, gt)
    m = metrics(cm)
    assert (m.pixel_acc, m.mean_acc, m.miou) == (1.0, 1.0, 1.0)
    assert np.trace(cm.counts) == 4


def test_two_class_hand_formula():
    cm = ConfusionMatrix(2)
    cm.counts[...] = [[3, 1], [1, 3]]
    m = metrics(cm)
    assert m.pixel_acc == 0.75
    assert m.mean_acc == 0.75
    assert np.allclose(m.class_iou, [0.6, 0.6])
    assert m.miou == pytest.approx(0.6)


def test_absent_class_excluded_from_means():
    cm = ConfusionMatrix(3)
    pred = np.array([1, 1, 2, 2])
    gt = np.array([1, 1, 2, 2])
    cm.accumulate(pred, gt)
    m = metrics(cm)
    assert np.isnan(m.class_acc[2]) and np.isnan(m.class_iou[2])
    assert (m.pixel_acc, m.mean_acc, m.miou) == (1.0, 1.0, 1.0)


def test_ignored_pixels_do_not_score():
    cm = ConfusionMatrix(2)
    cm.accumulate(np.array([1, 2, 1]), np.array([0, 0, 0]))
    assert cm.total == 0
    with pytest.raises(ValueError):
        metrics(cm)


def test_matches_double_loop_oracle():
    rng = np.random.default_rng(0)
    pred = rng.integers(1, 5, size=(9, 9))
    gt = rng.integers(0, 5, size=(9, 9))
    cm = ConfusionMatrix(4).accumulate(pred, gt)
    assert np.array_equal(cm.counts, confusion_direct(pred, gt, 4))


@given(st.data())
@settings(max_examples=40)
def test_consistent_relabel_keeps_summary_metrics(data):
    rng_seed = data.draw(st.integers(0, 10**6))
    rng = np.random.default_rng(rng_seed)
    k = data.draw(st.integers(2, 5))
    pred = rng.integers(1, k + 1, size=(6, 6))
    gt = rng.integers(0, k + 1, size=(6, 6))
    if not (gt > 0).any():
        gt[0, 0] = 1
    perm = rng.permutation(k) + 1
    m1 = metrics(ConfusionMatrix(k).accumulate(pred, gt))
    relabeled_gt = np.where(gt > 0, perm[gt - 1], 0)
    m2 = metrics(ConfusionMatrix(k).accumulate(perm[pred - 1], relabeled_gt))
    assert m1.pixel_acc == pytest.approx(m2.pixel_acc)
    assert m1.mean_acc == pytest.approx(m2.mean_acc)
    assert m1.miou == pytest.approx(m2.miou)
    assert np.allclose(m1.class_acc, m2.class_acc[perm - 1], equal_nan=True)


def test_accumulation_is_additive_over_batches():
    rng = np.random.default_rng(1)
    pred = rng.integers(1, 4, size=(10, 8))
    gt = rng.integers(0, 4, size=(10, 8))
    whole = ConfusionMatrix(3).accumulate(pred, gt)
    split = ConfusionMatrix(3)
    split.accumulate(pred[:4], gt[:4]).accumulate(pred[4:], gt[4:])
    assert np.array_equal(whole.counts, split.counts)
    merged = ConfusionMatrix(3).accumulate(pred[:4], gt[:4])
    merged.merge(ConfusionMatrix(3).accumulate(pred[4:], gt[4:]))
    assert np.array_equal(whole.counts, merged.counts)


def test_metrics_bounded():
    rng = np.random.default_rng(2)
    cm = ConfusionMatrix(4).accumulate(rng.integers(1, 5, size=50),
                                       rng.integers(0, 5, size=50))
    m = metrics(cm)
    for v in (m.pixel_acc, m.mean_acc, m.miou):
        assert 0.0 <= v <= 1.0


def test_input_validation():
    cm = ConfusionMatrix(3)
    with pytest.raises(ShapeError):
        cm.accumulate(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        cm.accumulate(np.zeros((2, 2), dtype=int), np.ones((2, 2), dtype=int))
    with pytest.raises(ShapeError):
        cm.accumulate(np.ones((2, 2), dtype=int), np.full((2, 2), 9))


def test_predict_labels_tie_breaks_low_class():
    scores = Tensor(np.zeros((1, 3, 2, 2)))
    assert np.all(predict_labels(scores) == 1)
    scores.data[0, 2] = 1.0
    assert np.all(predict_labels(scores) == 3)


def test_report_renders():
    cm = ConfusionMatrix(2)
    cm.counts[...] = [[3, 1], [1, 3]]
    text = report(cm, title="demo")
    assert "demo" in text and "pixel accuracy: 0.7500" in text
    assert "mean IoU:       0.6000" in text
