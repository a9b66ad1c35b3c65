"""Residual units: the encoder bottleneck and basic blocks, and the decoder
upsample block whose residual and shortcut paths both end in a stride-2
transposed convolution.

All three follow post-activation residual form: out = relu(residual + shortcut).
Spatial behavior is exact: keep, halve, or double, never off by one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d
from .tensor import Tensor, elementwise_add

KINDS = ("bottleneck", "basic", "upsample")
SPATIALS = ("keep", "down2", "up2")
SHORTCUTS = ("identity", "projection")


@dataclass(frozen=True)
class UnitSpec:
    """One residual unit: kind, channel counts m -> n, spatial mode, shortcut."""

    kind: str
    in_channels: int
    out_channels: int
    spatial: str = "keep"
    shortcut: str = "identity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown unit kind {self.kind!r}")
        if self.spatial not in SPATIALS:
            raise ValueError(f"unknown spatial mode {self.spatial!r}")
        if self.shortcut not in SHORTCUTS:
            raise ValueError(f"unknown shortcut {self.shortcut!r}")
        if min(self.in_channels, self.out_channels) < 1:
            raise ValueError(f"non-positive channel counts in {self}")
        if self.shortcut == "identity" and (
            self.in_channels != self.out_channels or self.spatial != "keep"
        ):
            raise ValueError(f"identity shortcut needs m == n and spatial keep: {self}")
        if (self.kind == "upsample") != (self.spatial == "up2"):
            raise ValueError(f"up2 pairs exactly with the upsample kind: {self}")
        if self.kind == "upsample" and self.shortcut != "projection":
            raise ValueError(f"upsample units always project their shortcut: {self}")
        if self.kind == "bottleneck" and self.out_channels % 4 != 0:
            raise ValueError(f"bottleneck output channels must divide by 4: {self}")


class _UnitBase:
    """Shared param/buffer iteration and the shortcut + sum + relu tail."""

    spec: UnitSpec

    def __init__(self, name: str, spec: UnitSpec):
        self.name = name
        self.spec = spec
        self._layers: list = []
        self._sc_layers: list = []
        self._cache: dict | None = None

    def _reg(self, layer, shortcut: bool = False):
        (self._sc_layers if shortcut else self._layers).append(layer)
        return layer

    def params(self):
        for layer in self._layers + self._sc_layers:
            yield from layer.params()

    def buffers(self):
        for layer in self._layers + self._sc_layers:
            yield from layer.buffers()

    def _join(self, residual: Tensor, shortcut: Tensor, train: bool) -> Tensor:
        if residual.data.shape != shortcut.data.shape:
            raise ShapeError(
                f"{self.name}: residual {tuple(residual.shape)} and shortcut "
                f"{tuple(shortcut.shape)} disagree"
            )
        z = elementwise_add(residual, shortcut)
        if train:
            self._cache["z"] = z
        return ops.relu_forward(z)

    def _join_backward(self, grad: Tensor) -> Tensor:
        if self._cache is None:
            raise ShapeError(f"{self.name}: backward without a train-mode forward")
        return ops.relu_backward(self._cache["z"], grad)


def _conv_bn(unit: _UnitBase, tag: str, conv_cls, in_ch: int, out_ch: int, kernel: int,
             stride: int, padding: int, *, rng, dtype, bn_eps, bn_momentum,
             shortcut: bool = False):
    conv = unit._reg(conv_cls(f"{unit.name}.{tag}", in_ch, out_ch, kernel, stride,
                              padding, bias=False, rng=rng, dtype=dtype), shortcut)
    bn = unit._reg(BatchNorm2d(f"{unit.name}.{tag}_bn", out_ch, eps=bn_eps,
                               momentum=bn_momentum, dtype=dtype), shortcut)
    return conv, bn


class BottleneckUnit(_UnitBase):
    """1x1 reduce -> 3x3 (stride 2 iff down2) -> 1x1 expand, each conv + BN.

    The spatial stride sits on the middle 3x3 convolution; a projection
    shortcut is a stride-matched 1x1 conv + BN.
    """

    def __init__(self, name: str, spec: UnitSpec, *, rng, dtype=np.float32,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        if spec.kind != "bottleneck":
            raise ValueError(f"{name}: spec kind {spec.kind!r} is not bottleneck")
        super().__init__(name, spec)
        m, n = spec.in_channels, spec.out_channels
        mid = n // 4
        stride = 2 if spec.spatial == "down2" else 1
        kw = dict(rng=rng, dtype=dtype, bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.conv1, self.bn1 = _conv_bn(self, "conv1", Conv2d, m, mid, 1, 1, 0, **kw)
        self.conv2, self.bn2 = _conv_bn(self, "conv2", Conv2d, mid, mid, 3, stride, 1, **kw)
        self.conv3, self.bn3 = _conv_bn(self, "conv3", Conv2d, mid, n, 1, 1, 0, **kw)
        if spec.shortcut == "projection":
            self.conv_sc, self.bn_sc = _conv_bn(self, "proj", Conv2d, m, n, 1, stride, 0,
                                                shortcut=True, **kw)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        self._cache = {} if train else None
        z1 = self.bn1.forward(self.conv1.forward(x, train), train)
        r1 = ops.relu_forward(z1)
        z2 = self.bn2.forward(self.conv2.forward(r1, train), train)
        r2 = ops.relu_forward(z2)
        z3 = self.bn3.forward(self.conv3.forward(r2, train), train)
        if self.spec.shortcut == "projection":
            sc = self.bn_sc.forward(self.conv_sc.forward(x, train), train)
        else:
            sc = x
        if train:
            self._cache.update(z1=z1, z2=z2)
        return self._join(z3, sc, train)

    def backward(self, grad: Tensor) -> Tensor:
        gz = self._join_backward(grad)
        g = self.conv3.backward(self.bn3.backward(gz))
        g = ops.relu_backward(self._cache["z2"], g)
        g = self.conv2.backward(self.bn2.backward(g))
        g = ops.relu_backward(self._cache["z1"], g)
        g = self.conv1.backward(self.bn1.backward(g))
        if self.spec.shortcut == "projection":
            g_sc = self.conv_sc.backward(self.bn_sc.backward(gz))
        else:
            g_sc = gz
        return elementwise_add(g, g_sc)


class BasicUnit(_UnitBase):
    """Two consecutive 3x3 convolutions; the first carries the stride."""

    def __init__(self, name: str, spec: UnitSpec, *, rng, dtype=np.float32,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        if spec.kind != "basic":
            raise ValueError(f"{name}: spec kind {spec.kind!r} is not basic")
        super().__init__(name, spec)
        m, n = spec.in_channels, spec.out_channels
        stride = 2 if spec.spatial == "down2" else 1
        kw = dict(rng=rng, dtype=dtype, bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.conv1, self.bn1 = _conv_bn(self, "conv1", Conv2d, m, n, 3, stride, 1, **kw)
        self.conv2, self.bn2 = _conv_bn(self, "conv2", Conv2d, n, n, 3, 1, 1, **kw)
        if spec.shortcut == "projection":
            self.conv_sc, self.bn_sc = _conv_bn(self, "proj", Conv2d, m, n, 1, stride, 0,
                                                shortcut=True, **kw)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        self._cache = {} if train else None
        z1 = self.bn1.forward(self.conv1.forward(x, train), train)
        r1 = ops.relu_forward(z1)
        z2 = self.bn2.forward(self.conv2.forward(r1, train), train)
        if self.spec.shortcut == "projection":
            sc = self.bn_sc.forward(self.conv_sc.forward(x, train), train)
        else:
            sc = x
        if train:
            self._cache.update(z1=z1)
        return self._join(z2, sc, train)

    def backward(self, grad: Tensor) -> Tensor:
        gz = self._join_backward(grad)
        g = self.conv2.backward(self.bn2.backward(gz))
        g = ops.relu_backward(self._cache["z1"], g)
        g = self.conv1.backward(self.bn1.backward(g))
        if self.spec.shortcut == "projection":
            g_sc = self.conv_sc.backward(self.bn_sc.backward(gz))
        else:
            g_sc = gz
        return elementwise_add(g, g_sc)


class UpsampleUnit(_UnitBase):
    """3x3 conv then 2x2 stride-2 transposed conv on the residual path; the
    shortcut is its own 2x2 stride-2 transposed conv.  Doubles H and W."""

    def __init__(self, name: str, spec: UnitSpec, *, rng, dtype=np.float32,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        if spec.kind != "upsample":
            raise ValueError(f"{name}: spec kind {spec.kind!r} is not upsample")
        super().__init__(name, spec)
        m, n = spec.in_channels, spec.out_channels
        kw = dict(rng=rng, dtype=dtype, bn_eps=bn_eps, bn_momentum=bn_momentum)
        self.conv1, self.bn1 = _conv_bn(self, "conv1", Conv2d, m, m, 3, 1, 1, **kw)
        self.up, self.bn2 = _conv_bn(self, "up", ConvTranspose2d, m, n, 2, 2, 0, **kw)
        self.up_sc, self.bn_sc = _conv_bn(self, "proj", ConvTranspose2d, m, n, 2, 2, 0,
                                          shortcut=True, **kw)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        self._cache = {} if train else None
        z1 = self.bn1.forward(self.conv1.forward(x, train), train)
        r1 = ops.relu_forward(z1)
        z2 = self.bn2.forward(self.up.forward(r1, train), train)
        sc = self.bn_sc.forward(self.up_sc.forward(x, train), train)
        if train:
            self._cache.update(z1=z1)
        return self._join(z2, sc, train)

    def backward(self, grad: Tensor) -> Tensor:
        gz = self._join_backward(grad)
        g = self.up.backward(self.bn2.backward(gz))
        g = ops.relu_backward(self._cache["z1"], g)
        g = self.conv1.backward(self.bn1.backward(g))
        g_sc = self.up_sc.backward(self.bn_sc.backward(gz))
        return elementwise_add(g, g_sc)


_UNIT_CLASSES = {"bottleneck": BottleneckUnit, "basic": BasicUnit, "upsample": UpsampleUnit}


def make_unit(name: str, spec: UnitSpec, **kw):
    return _UNIT_CLASSES[spec.kind](name, spec, **kw)
