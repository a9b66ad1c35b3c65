"""Layer primitives with hand-written forward and backward passes.

Convolutions run as im2col plus GEMM; the transposed convolution shares the
same machinery because it is exactly the input-gradient of a mirror
convolution (and its own input-gradient is a plain convolution).  Every
backward recomputes intermediates from the saved forward input, so callers
only ever keep ``x``.

Convolution here means cross-correlation: kernels are not flipped.  The
direct-loop references these kernels are validated against live in the test
suite, not in this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

__all__ = [
    "ConvParams",
    "BatchNormState",
    "conv2d_forward",
    "conv2d_backward",
    "transpose_conv2d_forward",
    "transpose_conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "relu_forward",
    "relu_backward",
    "maxpool_forward",
    "maxpool_backward",
    "nearest_indices",
    "resize_nearest",
    "resize_nearest_array",
    "resize_bilinear",
    "resize_bilinear_array",
    "weighted_softmax_cross_entropy",
]


@dataclass(frozen=True)
class ConvParams:
    """Geometry of one (transposed) convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    padding: int = 0
    has_bias: bool = False

    def __post_init__(self):
        kh, kw = self.kernel
        if min(self.in_channels, self.out_channels, kh, kw) < 1:
            raise ShapeError(f"non-positive conv geometry: {self}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"convolution output would be empty: input {h}x{w} with {self}"
            )
        return oh, ow

    def tconv_out_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h - 1) * self.stride - 2 * self.padding + kh
        ow = (w - 1) * self.stride - 2 * self.padding + kw
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"transposed convolution output would be empty: input {h}x{w} with {self}"
            )
        return oh, ow


# ----------------------------------------------------------------- im2col core


def _pad2d(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather all kernel windows of a padded input into (N, C, kh, kw, oh, ow)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols


def _scatter_windows(cols: np.ndarray, hp: int, wp: int, stride: int) -> np.ndarray:
    """Adjoint of _windows: scatter-add window gradients back onto the padded grid."""
    n, c, kh, kw, oh, ow = cols.shape
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp


def _corr_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int,
                  oh: int, ow: int) -> np.ndarray:
    n = x.shape[0]
    out_c, in_c, kh, kw = w.shape
    cols = _windows(_pad2d(x, padding), kh, kw, stride, oh, ow)
    lhs = w.reshape(out_c, in_c * kh * kw)
    rhs = cols.reshape(n, in_c * kh * kw, oh * ow)
    return np.matmul(lhs, rhs).reshape(n, out_c, oh, ow)


def _corr_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    n, out_c, oh, ow = g.shape
    _, in_c, kh, kw = w.shape
    h, wd = in_hw
    lhs = w.reshape(out_c, in_c * kh * kw)
    cols = np.matmul(lhs.T, g.reshape(n, out_c, oh * ow))
    cols = cols.reshape(n, in_c, kh, kw, oh, ow)
    xp = _scatter_windows(cols, h + 2 * padding, wd + 2 * padding, stride)
    return xp[:, :, padding : padding + h, padding : padding + wd]


def _corr_weight_grad(x: np.ndarray, g: np.ndarray, kernel: tuple[int, int],
                      stride: int, padding: int) -> np.ndarray:
    n, in_c = x.shape[:2]
    out_c, oh, ow = g.shape[1], g.shape[2], g.shape[3]
    kh, kw = kernel
    cols = _windows(_pad2d(x, padding), kh, kw, stride, oh, ow)
    a = g.reshape(n, out_c, oh * ow)
    b = cols.reshape(n, in_c * kh * kw, oh * ow)
    gw = np.matmul(a, b.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(out_c, in_c, kh, kw)


# ------------------------------------------------------------------ public ops


def _check_conv_inputs(x: Tensor, w: np.ndarray, b, p: ConvParams, w_shape: tuple) -> None:
    if x.shape.c != p.in_channels:
        raise ShapeError(
            f"input has {x.shape.c} channels, conv expects {p.in_channels} "
            f"(input shape {tuple(x.shape)})"
        )
    if w.shape != w_shape:
        raise ShapeError(f"weight shape {w.shape} does not match {w_shape} for {p}")
    if w.dtype != x.dtype:
        raise ShapeError(f"weight dtype {w.dtype} differs from input dtype {x.dtype}")
    if p.has_bias:
        if b is None or b.shape != (p.out_channels,):
            raise ShapeError(f"bias must have shape ({p.out_channels},)")
    elif b is not None:
        raise ShapeError("bias given but has_bias is False")


def conv2d_forward(x: Tensor, w: np.ndarray, b: np.ndarray | None, p: ConvParams) -> Tensor:
    """Cross-correlation of the zero-padded input with the kernel bank.

    Output spatial size is floor((H + 2p - k)/s) + 1 per axis.
    """
    kh, kw = p.kernel
    _check_conv_inputs(x, w, b, p, (p.out_channels, p.in_channels, kh, kw))
    oh, ow = p.out_size(*x.shape.spatial)
    out = _corr_forward(x.data, w, p.stride, p.padding, oh, ow)
    if b is not None:
        out += b[None, :, None, None]
    return Tensor(out)


def conv2d_backward(x: Tensor, w: np.ndarray, p: ConvParams, grad_out: Tensor):
    """Exact gradients of conv2d_forward: (grad_x, grad_w, grad_b)."""
    kh, kw = p.kernel
    oh, ow = p.out_size(*x.shape.spatial)
    expected = (x.shape.n, p.out_channels, oh, ow)
    if tuple(grad_out.shape) != expected:
        raise ShapeError(f"grad_out shape {tuple(grad_out.shape)} != forward output {expected}")
    gx = _corr_input_grad(grad_out.data, w, p.stride, p.padding, x.shape.spatial)
    gw = _corr_weight_grad(x.data, grad_out.data, p.kernel, p.stride, p.padding)
    gb = grad_out.data.sum(axis=(0, 2, 3)) if p.has_bias else None
    return Tensor(gx), gw, gb


def transpose_conv2d_forward(x: Tensor, w: np.ndarray, b: np.ndarray | None,
                             p: ConvParams) -> Tensor:
    """Transposed convolution; weights have shape (in, out, kh, kw).

    Equals the input-gradient of the mirror convolution driven by x:
    output spatial size is (H - 1)s - 2p + k, so k=2, s=2, p=0 doubles it.
    """
    kh, kw = p.kernel
    _check_conv_inputs(x, w, b, p, (p.in_channels, p.out_channels, kh, kw))
    oh, ow = p.tconv_out_size(*x.shape.spatial)
    # w read as the mirror conv's (out_c=in, in_c=out) kernel bank
    out = _corr_input_grad(x.data, w, p.stride, p.padding, (oh, ow))
    if b is not None:
        out += b[None, :, None, None]
    return Tensor(out)


def transpose_conv2d_backward(x: Tensor, w: np.ndarray, p: ConvParams, grad_out: Tensor):
    """Gradients of transpose_conv2d_forward; grad_x is a plain convolution."""
    oh, ow = p.tconv_out_size(*x.shape.spatial)
    expected = (x.shape.n, p.out_channels, oh, ow)
    if tuple(grad_out.shape) != expected:
        raise ShapeError(f"grad_out shape {tuple(grad_out.shape)} != forward output {expected}")
    h, wd = x.shape.spatial
    gx = _corr_forward(grad_out.data, w, p.stride, p.padding, h, wd)
    gw = _corr_weight_grad(grad_out.data, x.data, p.kernel, p.stride, p.padding)
    gb = grad_out.data.sum(axis=(0, 2, 3)) if p.has_bias else None
    return Tensor(gx), gw, gb


# ------------------------------------------------------------------ batch norm


@dataclass
class BatchNormState:
    """Learnable scale/shift plus running statistics for one channel axis.

    Train-mode forward normalizes by batch statistics and updates the
    running averages in place; eval mode reads the running averages.  The
    running variance stores the unbiased estimator.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32, eps: float = 1e-5,
               momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_check(x: Tensor, state: BatchNormState) -> None:
    if x.shape.c != state.channels:
        raise ShapeError(
            f"input has {x.shape.c} channels, batch norm expects {state.channels}"
        )


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    _bn_check(x, state)
    a = x.data
    if mode == "train":
        mu = a.mean(axis=(0, 2, 3))
        var = a.var(axis=(0, 2, 3))
        count = a.shape[0] * a.shape[2] * a.shape[3]
        unbiased = var * (count / max(count - 1, 1))
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mu
        state.running_var[...] = (1.0 - m) * state.running_var + m * unbiased
    elif mode == "eval":
        mu, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown batch norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (a - mu[None, :, None, None]) * inv[None, :, None, None]
    y = state.gamma[None, :, None, None] * xhat + state.beta[None, :, None, None]
    return Tensor(y.astype(a.dtype, copy=False))


def batchnorm_backward(x: Tensor, state: BatchNormState, grad_out: Tensor):
    """Train-mode gradients (gx, dgamma, dbeta); batch stats recomputed from x."""
    _bn_check(x, state)
    a, g = x.data, grad_out.data
    if a.shape != g.shape:
        raise ShapeError(f"grad_out shape {g.shape} != input shape {a.shape}")
    mu = a.mean(axis=(0, 2, 3))
    var = a.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (a - mu[None, :, None, None]) * inv[None, :, None, None]
    count = a.shape[0] * a.shape[2] * a.shape[3]
    dbeta = g.sum(axis=(0, 2, 3))
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    coef = (state.gamma * inv)[None, :, None, None]
    gx = coef * (
        g
        - dbeta[None, :, None, None] / count
        - xhat * dgamma[None, :, None, None] / count
    )
    return Tensor(gx.astype(a.dtype, copy=False)), dgamma, dbeta


# ------------------------------------------------------------------ relu, pool


def relu_forward(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    if x.data.shape != grad_out.data.shape:
        raise ShapeError(
            f"grad_out shape {tuple(grad_out.shape)} != input shape {tuple(x.shape)}"
        )
    return Tensor(grad_out.data * (x.data > 0))


def maxpool_forward(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1):
    """Max over each window of the padded input; returns (output, argmax).

    Padding uses -inf so padded cells are never selected.  Ties resolve to
    the first position in row-major window-scan order, which argmax over the
    flattened (ki, kj) axis provides.
    """
    p = ConvParams(x.shape.c, x.shape.c, (kernel, kernel), stride, padding)
    oh, ow = p.out_size(*x.shape.spatial)
    xp = _pad2d(x.data, padding, value=-np.inf)
    cols = _windows(xp, kernel, kernel, stride, oh, ow)
    flat = cols.reshape(x.shape.n, x.shape.c, kernel * kernel, oh, ow)
    idx = flat.argmax(axis=2)
    out = flat.max(axis=2)
    return Tensor(out), idx


def maxpool_backward(indices: np.ndarray, grad_out: Tensor, in_hw: tuple[int, int],
                     kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Scatter each output gradient to its stored argmax position."""
    g = grad_out.data
    n, c, oh, ow = g.shape
    if indices.shape != g.shape:
        raise ShapeError(f"argmax shape {indices.shape} != grad shape {g.shape}")
    h, w = in_hw
    ki, kj = np.divmod(indices, kernel)
    hi = ki + stride * np.arange(oh)[None, None, :, None]
    wi = kj + stride * np.arange(ow)[None, None, None, :]
    gpad = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(gpad, (ni, ci, hi, wi), g)
    return Tensor(gpad[:, :, padding : padding + h, padding : padding + w])


# ---------------------------------------------------------------------- resize


def nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    """Source index per destination index: floor((dst + 0.5) * in/out)."""
    if out_size < 1:
        raise ShapeError(f"output size must be >= 1, got {out_size}")
    scale_ = in_size / out_size
    idx = np.floor((np.arange(out_size) + 0.5) * scale_).astype(np.int64)
    return np.clip(idx, 0, in_size - 1)


def resize_nearest_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize over the trailing two axes of any array."""
    hi = nearest_indices(a.shape[-2], out_h)
    wi = nearest_indices(a.shape[-1], out_w)
    return a[..., hi[:, None], wi[None, :]]


def resize_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return Tensor(resize_nearest_array(x.data, out_h, out_w))


def _linear_coords(in_size: int, out_size: int):
    if out_size < 1:
        raise ShapeError(f"output size must be >= 1, got {out_size}")
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    lo = np.clip(i0, 0, in_size - 1)
    hi = np.clip(i0 + 1, 0, in_size - 1)
    return lo, hi, frac


def resize_bilinear_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize, half-pixel centers, edges clamped."""
    y0, y1, fy = _linear_coords(a.shape[-2], out_h)
    x0, x1, fx = _linear_coords(a.shape[-1], out_w)
    fy = fy.reshape(-1, 1)
    fx = fx.reshape(1, -1)
    v00 = a[..., y0[:, None], x0[None, :]]
    v01 = a[..., y0[:, None], x1[None, :]]
    v10 = a[..., y1[:, None], x0[None, :]]
    v11 = a[..., y1[:, None], x1[None, :]]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return (top + fy * (bot - top)).astype(a.dtype, copy=False)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    return Tensor(resize_bilinear_array(x.data, out_h, out_w))


# --------------------------------------------------------- weighted softmax CE


def weighted_softmax_cross_entropy(scores: Tensor, labels: np.ndarray,
                                   class_weights: np.ndarray,
                                   ignore_index: int = 0):
    """Per-pixel class-weighted cross entropy, mean over non-ignored pixels.

    ``labels`` holds class ids 1..K (channel c scores class c+1); pixels
    equal to ``ignore_index`` contribute nothing and are excluded from the
    normalizer.  Softmax is stabilized by max subtraction.  Returns
    (loss, grad_scores); with zero scorable pixels both are zero.
    """
    s = scores.data
    n, k, h, w = s.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != scores spatial {(n, h, w)}")
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (k,):
        raise ShapeError(f"class weights shape {class_weights.shape} != ({k},)")
    valid = labels != ignore_index
    in_range = valid & (labels >= 1) & (labels <= k)
    if np.any(valid & ~in_range):
        bad = labels[valid & ~in_range].flat[0]
        raise ShapeError(f"label {bad} outside [1, {k}] and not ignore value {ignore_index}")

    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, Tensor(np.zeros_like(s))

    m = s.max(axis=1, keepdims=True)
    z = np.exp(s - m)
    sz = z.sum(axis=1, keepdims=True)
    prob = z / sz

    gather = np.where(valid, labels - 1, 0)[:, None]  # safe index for ignored pixels
    s_g = np.take_along_axis(s, gather, axis=1)[:, 0]
    alpha = np.where(valid, class_weights[gather[:, 0]], 0.0).astype(s.dtype)

    ce = np.log(sz[:, 0]) + m[:, 0] - s_g
    loss = float((alpha * ce).sum() / n_valid)

    grad = prob * (alpha / n_valid)[:, None]
    at_label = np.take_along_axis(grad, gather, axis=1) - (alpha / n_valid)[:, None]
    np.put_along_axis(grad, gather, at_label, axis=1)
    return loss, Tensor(grad.astype(s.dtype, copy=False))
