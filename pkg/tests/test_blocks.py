import numpy as np
import pytest

from rednet.blocks import BasicUnit, BottleneckUnit, UnitSpec, UpsampleUnit, make_unit
from rednet.tensor import Tensor


def _zero_residual(unit):
    """Zero every residual-path conv weight; BN affine stays pass-through."""
    for p in unit.params():
        if p.name.endswith(".w"):
            p.data[...] = 0.0


def test_spec_invariants():
    with pytest.raises(ValueError):
        UnitSpec("bottleneck", 8, 16, "keep", "identity")  # m != n with identity
    with pytest.raises(ValueError):
        UnitSpec("basic", 8, 8, "down2", "identity")       # resize with identity
    with pytest.raises(ValueError):
        UnitSpec("basic", 8, 8, "up2", "projection")       # up2 outside upsample
    with pytest.raises(ValueError):
        UnitSpec("upsample", 8, 8, "down2", "projection")  # upsample must up2
    with pytest.raises(ValueError):
        UnitSpec("upsample", 8, 8, "up2", "identity")      # upsample projects
    with pytest.raises(ValueError):
        UnitSpec("bottleneck", 8, 10, "keep", "projection")  # n % 4
    with pytest.raises(ValueError):
        UnitSpec("pyramid", 8, 8)


def test_kind_mismatch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="not basic"):
        BasicUnit("u", UnitSpec("bottleneck", 8, 8), rng=rng)


@pytest.mark.parametrize("kind", ["bottleneck", "basic"])
def test_zero_residual_identity_is_relu(kind):
    rng = np.random.default_rng(1)
    unit = make_unit("u", UnitSpec(kind, 8, 8), rng=rng, dtype=np.float64)
    _zero_residual(unit)
    x = Tensor(np.random.default_rng(2).normal(size=(2, 8, 5, 5)))
    out = unit.forward(x, train=False)  # eval BN maps the zero map to zero
    expected = np.maximum(x.data, 0)
    assert np.abs(out.data - expected).max() < 1e-12


def test_bottleneck_layer4_shape():
    rng = np.random.default_rng(3)
    unit = BottleneckUnit("u", UnitSpec("bottleneck", 1024, 2048, "down2", "projection"),
                          rng=rng)
    x = Tensor(np.zeros((1, 1024, 30, 40), dtype=np.float32))
    assert tuple(unit.forward(x, train=False).shape) == (1, 2048, 15, 20)


def test_basic_keep_preserves_shape():
    rng = np.random.default_rng(4)
    unit = BasicUnit("u", UnitSpec("basic", 6, 6), rng=rng)
    x = Tensor(np.random.default_rng(5).normal(size=(2, 6, 9, 11)).astype(np.float32))
    assert unit.forward(x, train=False).data.shape == x.data.shape


@pytest.mark.parametrize("m,n,h,w", [(512, 256, 15, 20), (64, 64, 120, 160)])
def test_upsample_doubles_shape(m, n, h, w):
    rng = np.random.default_rng(6)
    unit = UpsampleUnit("u", UnitSpec("upsample", m, n, "up2", "projection"), rng=rng)
    x = Tensor(np.zeros((1, m, h, w), dtype=np.float32))
    assert tuple(unit.forward(x, train=False).shape) == (1, n, 2 * h, 2 * w)


@pytest.mark.parametrize("spec,factor", [
    (UnitSpec("bottleneck", 8, 8), 1),
    (UnitSpec("bottleneck", 8, 16, "down2", "projection"), -2),
    (UnitSpec("basic", 8, 8), 1),
    (UnitSpec("basic", 8, 12, "down2", "projection"), -2),
    (UnitSpec("upsample", 8, 4, "up2", "projection"), 2),
])
def test_spatial_factor_exact(spec, factor):
    rng = np.random.default_rng(7)
    unit = make_unit("u", spec, rng=rng)
    for h, w in ((6, 8), (10, 6)):
        x = Tensor(np.zeros((1, spec.in_channels, h, w), dtype=np.float32))
        out = unit.forward(x, train=False)
        if factor == 1:
            assert out.shape.spatial == (h, w)
        elif factor == 2:
            assert out.shape.spatial == (2 * h, 2 * w)
        else:
            assert out.shape.spatial == (h // 2, w // 2)


def test_backward_requires_forward():
    rng = np.random.default_rng(8)
    unit = BasicUnit("u", UnitSpec("basic", 4, 4), rng=rng)
    with pytest.raises(Exception, match="forward"):
        unit.backward(Tensor(np.zeros((1, 4, 4, 4), dtype=np.float32)))
