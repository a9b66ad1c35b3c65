"""Thin stateful wrappers over the functional ops: weight storage, forward
caches for backward, and gradient accumulation.

A layer caches its input only when forward runs in train mode; eval-mode
forwards keep no references so large inference batches stay cheap.  Backward
must follow a train-mode forward on the same instance.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeError
from .optim import Param, xavier_init
from .tensor import Tensor


class Conv2d:
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = False, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.p = ops.ConvParams(in_channels, out_channels, (kernel, kernel),
                                stride, padding, has_bias=bias)
        self.w = Param(name + ".w", xavier_init((out_channels, in_channels, kernel, kernel),
                                                rng, dtype), decay=True)
        self.b = Param(name + ".b", np.zeros(out_channels, dtype=dtype), decay=False) if bias else None
        self._x: Tensor | None = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        self._x = x if train else None
        return ops.conv2d_forward(x, self.w.data, self.b.data if self.b else None, self.p)

    def backward(self, grad: Tensor) -> Tensor:
        if self._x is None:
            raise ShapeError(f"{self.name}: backward without a train-mode forward")
        gx, gw, gb = ops.conv2d_backward(self._x, self.w.data, self.p, grad)
        self.w.grad += gw
        if self.b is not None:
            self.b.grad += gb
        return gx

    def params(self):
        yield self.w
        if self.b is not None:
            yield self.b

    def buffers(self):
        return ()


class ConvTranspose2d:
    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0, bias: bool = False, *,
                 rng: np.random.Generator, dtype=np.float32):
        self.name = name
        self.p = ops.ConvParams(in_channels, out_channels, (kernel, kernel),
                                stride, padding, has_bias=bias)
        self.w = Param(name + ".w", xavier_init((in_channels, out_channels, kernel, kernel),
                                                rng, dtype), decay=True)
        self.b = Param(name + ".b", np.zeros(out_channels, dtype=dtype), decay=False) if bias else None
        self._x: Tensor | None = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        self._x = x if train else None
        return ops.transpose_conv2d_forward(x, self.w.data, self.b.data if self.b else None, self.p)

    def backward(self, grad: Tensor) -> Tensor:
        if self._x is None:
            raise ShapeError(f"{self.name}: backward without a train-mode forward")
        gx, gw, gb = ops.transpose_conv2d_backward(self._x, self.w.data, self.p, grad)
        self.w.grad += gw
        if self.b is not None:
            self.b.grad += gb
        return gx

    def params(self):
        yield self.w
        if self.b is not None:
            yield self.b

    def buffers(self):
        return ()


class BatchNorm2d:
    def __init__(self, name: str, channels: int, *, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float32):
        self.name = name
        self.state = ops.BatchNormState.create(channels, dtype=dtype, eps=eps,
                                               momentum=momentum)
        # Params alias the state arrays so optimizer updates land in the state.
        self.gamma = Param(name + ".gamma", self.state.gamma, decay=True)
        self.beta = Param(name + ".beta", self.state.beta, decay=True)
        self._x: Tensor | None = None

    def forward(self, x: Tensor, train: bool) -> Tensor:
        self._x = x if train else None
        return ops.batchnorm_forward(x, self.state, "train" if train else "eval")

    def backward(self, grad: Tensor) -> Tensor:
        if self._x is None:
            raise ShapeError(f"{self.name}: backward without a train-mode forward")
        gx, dgamma, dbeta = ops.batchnorm_backward(self._x, self.state, grad)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return gx

    def params(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield self.name + ".running_mean", self.state.running_mean
        yield self.name + ".running_var", self.state.running_var
