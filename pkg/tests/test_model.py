import numpy as np
import pytest

from rednet.errors import ConfigError, ShapeError
from rednet.model import (AGENT_CHANNELS, LayerPlan, NetworkConfig, PyramidOutputs,
                          RedNet)
from rednet.tensor import Tensor

# frozen by the layer-enumeration script scripts/enumerate_layers.py
CONV_WEIGHT_TENSORS_DEPTH50 = 158
CONV_WEIGHT_TENSORS_DEPTH34 = 119


def tiny(depth=50, classes=4, hw=64, div=8):
    return NetworkConfig.for_depth(depth, num_classes=classes, height=hw, width=hw,
                                   channel_div=div)


def test_depth50_plans_match_published_table():
    cfg = NetworkConfig.for_depth(50, num_classes=37)
    assert cfg.stem_channels == 64
    assert cfg.encoder == (
        LayerPlan(64, 256, 3),
        LayerPlan(256, 512, 4),
        LayerPlan(512, 1024, 6),
        LayerPlan(1024, 2048, 3),
    )
    assert cfg.decoder == (
        LayerPlan(512, 256, 6),
        LayerPlan(256, 128, 4),
        LayerPlan(128, 64, 3),
        LayerPlan(64, 64, 3),
        LayerPlan(64, 64, 3),
    )
    assert cfg.agent_channels == AGENT_CHANNELS == (64, 64, 128, 256, 512)


def test_depth34_plans():
    cfg = NetworkConfig.for_depth(34, num_classes=37)
    assert [p.n for p in cfg.encoder] == [64, 128, 256, 512]
    assert [p.units for p in cfg.encoder] == [3, 4, 6, 3]
    assert cfg.agent_channels is None
    assert cfg.decoder == NetworkConfig.for_depth(50, num_classes=37).decoder


def test_config_rejections():
    with pytest.raises(ConfigError):
        NetworkConfig.for_depth(18, num_classes=4)
    with pytest.raises(ConfigError):
        NetworkConfig.for_depth(50, num_classes=4, height=100, width=64)
    with pytest.raises(ConfigError):
        NetworkConfig.for_depth(50, num_classes=4, channel_div=7)
    with pytest.raises(ConfigError):
        NetworkConfig.for_depth(50, num_classes=1)


@pytest.mark.parametrize("depth", [34, 50])
def test_toy_output_resolution_chain(depth):
    net = RedNet(tiny(depth), seed=0)
    rgb = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
    dep = Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))
    outs = net.forward(rgb, dep, "eval")
    sizes = [tuple(t.shape) for t in outs.as_tuple()]
    assert sizes == [(1, 4, 4, 4), (1, 4, 8, 8), (1, 4, 16, 16),
                     (1, 4, 32, 32), (1, 4, 64, 64)]


@pytest.mark.parametrize("depth", [34, 50])
def test_full_resolution_shape_law(depth):
    # 480x640 input: outputs at 30x40, 60x80, 120x160, 240x320, 480x640
    net = RedNet(NetworkConfig.for_depth(depth, num_classes=5), seed=0)
    rgb = Tensor(np.zeros((1, 3, 480, 640), dtype=np.float32))
    dep = Tensor(np.zeros((1, 1, 480, 640), dtype=np.float32))
    outs = net.forward(rgb, dep, "eval")
    assert [t.shape.spatial for t in outs.as_tuple()] == [
        (30, 40), (60, 80), (120, 160), (240, 320), (480, 640)]
    assert all(t.shape.c == 5 for t in outs.as_tuple())


def test_build_is_deterministic_per_seed():
    a = RedNet(tiny(), seed=11)
    b = RedNet(tiny(), seed=11)
    c = RedNet(tiny(), seed=12)
    pa, pb, pc = a.named_params(), b.named_params(), c.named_params()
    assert pa.keys() == pb.keys()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)
    assert any(not np.array_equal(pa[k].data, pc[k].data) for k in pa)


def test_conv_weight_tensor_count_frozen():
    for depth, expected in ((50, CONV_WEIGHT_TENSORS_DEPTH50),
                            (34, CONV_WEIGHT_TENSORS_DEPTH34)):
        net = RedNet(tiny(depth), seed=0)
        n_conv_w = sum(1 for name, p in net.named_params().items()
                       if name.endswith(".w") and p.data.ndim == 4)
        assert n_conv_w == expected, f"depth {depth}"


def test_depth34_has_no_agent_parameters():
    net = RedNet(tiny(34), seed=0)
    assert not any(name.startswith("agent") for name in net.named_params())


def test_param_set_difference_between_depths():
    p50 = set(RedNet(tiny(50), seed=0).named_params())
    p34 = set(RedNet(tiny(34), seed=0).named_params())
    only50 = {n for n in p50 - p34 if n.startswith("agent")}
    assert only50 == {f"agent{i}.{s}" for i in range(5) for s in ("w", "b")}
    # remaining differences are bottleneck-vs-basic unit internals
    assert all(".conv3" in n or ".proj" in n or "agent" in n for n in p50 - p34)


def test_eval_forward_deterministic():
    net = RedNet(tiny(), seed=3)
    rng = np.random.default_rng(0)
    rgb = Tensor(rng.normal(size=(2, 3, 64, 64)).astype(np.float32))
    dep = Tensor(rng.normal(size=(2, 1, 64, 64)).astype(np.float32))
    a = net.forward(rgb, dep, "eval")
    b = net.forward(rgb, dep, "eval")
    for ta, tb in zip(a.as_tuple(), b.as_tuple()):
        assert np.array_equal(ta.data, tb.data)


def test_zero_depth_contributes_exactly_nothing():
    # with a zero depth map every depth-branch activation is exactly zero at
    # fresh running stats, so fusion adds zero: scaling the depth stem must
    # not change any output bit
    net = RedNet(tiny(), seed=5)
    rng = np.random.default_rng(1)
    rgb = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
    dep = Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))
    before = net.forward(rgb, dep, "eval")
    net.named_params()["depth.conv1.w"].data[...] *= 7.0
    after = net.forward(rgb, dep, "eval")
    for ta, tb in zip(before.as_tuple(), after.as_tuple()):
        assert np.array_equal(ta.data, tb.data)


def test_junction_errors_name_the_junction():
    net = RedNet(tiny(), seed=0)
    rgb = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
    with pytest.raises(ShapeError, match="junction depth input"):
        net.forward(rgb, Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)), "eval")
    with pytest.raises(ShapeError, match="junction rgb input"):
        net.forward(Tensor(np.zeros((1, 3, 32, 32), dtype=np.float32)),
                    Tensor(np.zeros((1, 1, 32, 32), dtype=np.float32)), "eval")
    with pytest.raises(ShapeError, match="junction depth input"):
        net.forward(rgb, Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)), "eval")


def test_zero_output_grads_give_zero_param_grads():
    net = RedNet(tiny(), seed=2)
    rng = np.random.default_rng(2)
    rgb = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
    dep = Tensor(rng.normal(size=(1, 1, 64, 64)).astype(np.float32))
    outs = net.forward(rgb, dep, "train")
    net.zero_grad()
    net.backward(PyramidOutputs(*[Tensor(np.zeros_like(t.data)) for t in outs.as_tuple()]))
    assert all(not p.grad.any() for p in net.params())


def test_backward_requires_train_forward():
    net = RedNet(tiny(), seed=2)
    rgb = Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32))
    dep = Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))
    outs = net.forward(rgb, dep, "eval")
    with pytest.raises(ShapeError, match="train-mode"):
        net.backward(PyramidOutputs(*[Tensor(np.zeros_like(t.data))
                                      for t in outs.as_tuple()]))


def test_final_head_only_equals_side_weight_zero():
    from rednet.loss import ClassWeights, build_pyramid_targets, pyramid_loss
    net = RedNet(tiny(), seed=4)
    rng = np.random.default_rng(3)
    rgb = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
    dep = Tensor(rng.normal(size=(1, 1, 64, 64)).astype(np.float32))
    labels = rng.integers(0, 5, size=(1, 64, 64))
    targets = build_pyramid_targets(labels)
    weights = ClassWeights.uniform(4)

    outs = net.forward(rgb, dep, "train")
    _, _, grads = pyramid_loss(outs, targets, weights, side_weight=0.0)
    net.zero_grad()
    net.backward(grads)
    via_pyramid = {n: p.grad.copy() for n, p in net.named_params().items()}

    outs = net.forward(rgb, dep, "train")
    _, _, grads_full = pyramid_loss(outs, targets, weights, side_weight=1.0)
    only_final = PyramidOutputs(
        *[Tensor(np.zeros_like(t.data)) for t in grads_full.as_tuple()[:4]],
        grads_full.final)
    net.zero_grad()
    net.backward(only_final)
    for n, p in net.named_params().items():
        assert np.array_equal(p.grad, via_pyramid[n]), n
