"""Momentum SGD with decoupled-by-flag weight decay, the step-decay learning
rate schedule, and Xavier-uniform initialization."""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

__all__ = ["Param", "SGD", "lr_at_epoch", "xavier_init"]


class Param:
    """Learnable array with a gradient accumulator and a decay flag.

    ``data`` may be shared with other structures (batch-norm state); the
    optimizer updates it in place, which is the package's one documented
    in-place mutation of tensor storage.
    """

    __slots__ = ("name", "data", "grad", "decay")

    def __init__(self, name: str, data: np.ndarray, decay: bool):
        self.name = name
        self.data = data
        self.grad = np.zeros_like(data)
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.data.shape}, decay={self.decay})"


def xavier_init(shape: tuple[int, ...], rng: np.random.Generator,
                dtype=np.float32) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)), fans = channels x kernel area.

    Works for both conv (out, in, kh, kw) and transposed-conv (in, out, kh, kw)
    weights since the fan sum is symmetric in the two channel axes.
    """
    if len(shape) != 4:
        raise ShapeError(f"xavier_init expects a rank-4 weight shape, got {shape}")
    c0, c1, kh, kw = shape
    bound = math.sqrt(6.0 / ((c0 + c1) * kh * kw))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def lr_at_epoch(base: float, epoch: int, decay: float = 0.8, every: int = 100) -> float:
    """lr = base * decay ** floor(epoch / every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * decay ** (epoch // every)


class SGD:
    """theta <- theta - lr * v with v <- mu * v + (g + lambda * theta).

    Weight decay folds into the gradient before the momentum update and only
    touches params whose ``decay`` flag is set (conv/transpose weights and
    batch-norm gamma/beta; never biases, never running statistics).
    """

    def __init__(self, params: list[Param], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0004):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        for p in self.params:
            g = p.grad
            if p.decay and self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def load_velocity(self, arrays: dict[str, np.ndarray]) -> None:
        for name, v in self.velocity.items():
            if name not in arrays:
                raise ShapeError(f"missing velocity for {name}")
            src = arrays[name].reshape(v.shape).astype(v.dtype)
            v[...] = src
