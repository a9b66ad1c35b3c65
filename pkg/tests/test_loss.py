import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rednet.errors import ShapeError
from rednet.loss import (ClassWeights, build_pyramid_targets, count_label_pixels,
                         load_class_counts, median_frequency_weights, pyramid_loss,
                         save_class_counts)
from rednet.model import PyramidOutputs
from rednet.tensor import Tensor


def uniform_outputs(batch, k, h, w, value=0.0):
    def t(hh, ww):
        return Tensor(np.full((batch, k, hh, ww), value, dtype=np.float64))
    return PyramidOutputs(t(h // 16, w // 16), t(h // 8, w // 8), t(h // 4, w // 4),
                          t(h // 2, w // 2), t(h, w))


# ------------------------------------------------------------- class weights


def test_uniform_counts_give_unit_weights():
    w = median_frequency_weights([10, 10, 10, 10])
    assert np.array_equal(w.alpha, np.ones(4))


def test_hand_evaluated_formula():
    w = median_frequency_weights([1, 2, 4])
    assert np.allclose(w.alpha, [2.0, 1.0, 0.5], rtol=0, atol=1e-12)


def test_zero_count_class_flagged():
    w = median_frequency_weights([5, 0, 5])
    assert w.alpha[1] == 0.0 and not w.present[1]
    assert np.array_equal(w.alpha[[0, 2]], [1.0, 1.0])


def test_all_zero_counts_rejected():
    with pytest.raises(ValueError):
        median_frequency_weights([0, 0])


@given(st.lists(st.integers(min_value=0, max_value=10**6), min_size=2, max_size=12),
       st.integers(min_value=1, max_value=1000))
def test_weight_scale_invariance_exact(counts, k):
    if sum(counts) == 0:
        counts[0] = 1
    a = median_frequency_weights(counts)
    b = median_frequency_weights([c * k for c in counts])
    assert np.array_equal(a.alpha, b.alpha)


@given(st.lists(st.integers(min_value=1, max_value=10**6), min_size=3, max_size=11))
def test_median_class_gets_weight_one(counts):
    if len(counts) % 2 == 0:
        counts = counts[:-1]  # odd count so a class sits exactly at the median
    w = median_frequency_weights(counts)
    assert np.any(np.abs(w.alpha - 1.0) < 1e-9)


def test_class_count_file_round_trip(tmp_path):
    counts = np.array([7, 0, 123], dtype=np.int64)
    save_class_counts(tmp_path / "c.txt", counts)
    assert np.array_equal(load_class_counts(tmp_path / "c.txt"), counts)


def test_count_label_pixels_excludes_ignore():
    maps = [np.array([[0, 1], [2, 2]]), np.array([[2, 0], [0, 1]])]
    assert np.array_equal(count_label_pixels(maps, 3), [2, 3, 0])


# ------------------------------------------------------------ target pyramids


def test_constant_map_stays_constant():
    labels = np.full((2, 64, 64), 3, dtype=np.int32)
    t = build_pyramid_targets(labels)
    for m in t.as_tuple():
        assert np.all(m == 3)


def test_full_resolution_pyramid_sizes():
    labels = np.zeros((1, 480, 640), dtype=np.int32)
    t = build_pyramid_targets(labels, (480, 640))
    assert [m.shape[1:] for m in t.as_tuple()] == [
        (30, 40), (60, 80), (120, 160), (240, 320), (480, 640)]


def test_checkerboard_downsample_matches_index_formula():
    base = np.indices((4, 4)).sum(axis=0) % 2 + 1
    labels = np.tile(base, (8, 8))[None].astype(np.int32)  # 32x32
    t = build_pyramid_targets(labels)
    half = t.out4[0]
    for i in range(16):
        for j in range(16):
            si = int(np.floor((i + 0.5) * 2))
            sj = int(np.floor((j + 0.5) * 2))
            assert half[i, j] == labels[0, si, sj]


def test_pyramid_size_mismatch_rejected():
    with pytest.raises(ShapeError):
        build_pyramid_targets(np.zeros((1, 64, 64), dtype=np.int32), (32, 32))
    with pytest.raises(ShapeError):
        build_pyramid_targets(np.zeros((1, 50, 50), dtype=np.int32))


# --------------------------------------------------------------- pyramid loss


def test_uniform_scores_total_is_five_log_k():
    outs = uniform_outputs(1, 4, 64, 64)
    targets = build_pyramid_targets(np.ones((1, 64, 64), dtype=np.int32))
    total, terms, _ = pyramid_loss(outs, targets, ClassWeights.uniform(4))
    assert abs(total - 5 * math.log(4)) < 1e-9
    assert all(abs(t - math.log(4)) < 1e-12 for t in terms)


def test_side_weight_zero_reduces_to_final_term():
    rng = np.random.default_rng(0)
    outs = uniform_outputs(1, 4, 64, 64)
    for t in outs.as_tuple():
        t.data[...] = rng.normal(size=t.data.shape)
    labels = rng.integers(0, 5, size=(1, 64, 64))
    targets = build_pyramid_targets(labels)
    w = ClassWeights.uniform(4)
    total, terms, grads = pyramid_loss(outs, targets, w, side_weight=0.0)
    assert total == terms[4]
    for g in grads.as_tuple()[:4]:
        assert not g.data.any()
    assert grads.final.data.any()


def test_single_out1_pixel_weighs_256x_a_final_pixel():
    outs = uniform_outputs(1, 4, 64, 64)
    labels = np.ones((1, 64, 64), dtype=np.int32)
    targets = build_pyramid_targets(labels)
    w = ClassWeights.uniform(4)
    base, _, _ = pyramid_loss(outs, targets, w)

    bump = 0.3
    outs.out1.data[0, 0, 1, 1] += bump
    with_out1, _, _ = pyramid_loss(outs, targets, w)
    outs.out1.data[0, 0, 1, 1] -= bump
    outs.final.data[0, 0, 1, 1] += bump
    with_final, _, _ = pyramid_loss(outs, targets, w)

    ratio = (with_out1 - base) / (with_final - base)
    assert abs(ratio - 256.0) / 256.0 < 0.01


def test_total_invariant_under_recomputation():
    rng = np.random.default_rng(1)
    outs = uniform_outputs(2, 3, 32, 32)
    for t in outs.as_tuple():
        t.data[...] = rng.normal(size=t.data.shape)
    labels = rng.integers(0, 4, size=(2, 32, 32))
    targets = build_pyramid_targets(labels)
    w = ClassWeights.uniform(3)
    total1, _, _ = pyramid_loss(outs, targets, w)
    total2, _, _ = pyramid_loss(outs, targets, w)
    assert total1 == total2


def test_loss_vanishes_with_large_margin():
    labels = np.ones((1, 32, 32), dtype=np.int32)
    outs = uniform_outputs(1, 3, 32, 32)
    for t in outs.as_tuple():
        t.data[:, 0] = 20.0  # correct logit exceeds the rest by 20
    targets = build_pyramid_targets(labels)
    total, _, _ = pyramid_loss(outs, targets, ClassWeights.uniform(3))
    assert total < 1e-6


def test_final_gradient_ignores_side_targets():
    rng = np.random.default_rng(2)
    outs = uniform_outputs(1, 4, 32, 32)
    for t in outs.as_tuple():
        t.data[...] = rng.normal(size=t.data.shape)
    labels = rng.integers(1, 5, size=(1, 32, 32))
    t1 = build_pyramid_targets(labels)
    _, _, g1 = pyramid_loss(outs, t1, ClassWeights.uniform(4))
    # corrupt the side targets only
    t2 = build_pyramid_targets(labels)
    t2.out1[...] = 1
    t2.out3[...] = 2
    _, _, g2 = pyramid_loss(outs, t2, ClassWeights.uniform(4))
    assert np.array_equal(g1.final.data, g2.final.data)


def test_resolution_mismatch_rejected():
    outs = uniform_outputs(1, 4, 64, 64)
    targets = build_pyramid_targets(np.ones((1, 32, 32), dtype=np.int32))
    with pytest.raises(ShapeError):
        pyramid_loss(outs, targets, ClassWeights.uniform(4))
