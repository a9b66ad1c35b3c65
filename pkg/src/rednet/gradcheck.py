"""Finite-difference verification of every hand-written backward pass.

All checks run in double precision with central differences (step 1e-5) and
report the worst relative error against the analytic gradient.  A scalar
objective is built by projecting each op's output onto a fixed random
direction.  Inputs for relu and max-pool are nudged away from kinks and ties
so the difference quotient stays valid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import loss as loss_mod
from . import ops
from .blocks import UnitSpec, make_unit
from .model import NetworkConfig, PyramidOutputs, RedNet
from .tensor import Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5


@dataclass(frozen=True)
class CheckRow:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self) -> str:
        flag = "pass" if self.ok else "FAIL"
        return f"{flag}  {self.name:<40} max rel err {self.max_rel_err:.3e} (tol {self.tolerance:g})"


def fd_grad(f, arr: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central finite differences of a scalar function over every element."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = f()
        flat[i] = keep - step
        lo = f()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * step)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-8
    return float((np.abs(analytic - numeric) / denom).max())


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return a + np.sign(a) * margin


def _separated_pool_input(rng, shape, kernel=3, stride=2, padding=1) -> np.ndarray:
    """Random input whose in-window values are no closer than 1e-3 apart."""
    for _ in range(100):
        a = rng.uniform(-1, 1, size=shape)
        _, idx = ops.maxpool_forward(Tensor(a), kernel, stride, padding)
        xp = np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
        oh, ow = idx.shape[2:]
        cols = ops._windows(xp, kernel, kernel, stride, oh, ow)
        flat = cols.reshape(*cols.shape[:2], kernel * kernel, oh, ow)
        top2 = np.sort(np.where(np.isfinite(flat), flat, -1e9), axis=2)[:, :, -2:]
        if (top2[:, :, 1] - top2[:, :, 0]).min() > 1e-3:
            return a
    raise RuntimeError("could not build a tie-free pooling input")


def _proj_loss(out: Tensor, direction: np.ndarray) -> float:
    return float((out.data * direction).sum())


def _check_conv(rng) -> list[CheckRow]:
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.5
    b = rng.normal(size=4) * 0.1
    p = ops.ConvParams(3, 4, (3, 3), stride=2, padding=1, has_bias=True)
    direction = rng.normal(size=(2, 4) + p.out_size(6, 7))

    def f():
        return _proj_loss(ops.conv2d_forward(Tensor(x), w, b, p), direction)

    gx, gw, gb = ops.conv2d_backward(Tensor(x), w, p, Tensor(direction))
    return [
        CheckRow("conv2d grad_x", rel_err(gx.data, fd_grad(f, x)), OP_TOL),
        CheckRow("conv2d grad_w", rel_err(gw, fd_grad(f, w)), OP_TOL),
        CheckRow("conv2d grad_b", rel_err(gb, fd_grad(f, b)), OP_TOL),
    ]


def _check_tconv(rng) -> list[CheckRow]:
    x = rng.normal(size=(1, 4, 3, 3))
    w = rng.normal(size=(4, 3, 2, 2)) * 0.5
    b = rng.normal(size=3) * 0.1
    p = ops.ConvParams(4, 3, (2, 2), stride=2, padding=0, has_bias=True)
    direction = rng.normal(size=(1, 3) + p.tconv_out_size(3, 3))

    def f():
        return _proj_loss(ops.transpose_conv2d_forward(Tensor(x), w, b, p), direction)

    gx, gw, gb = ops.transpose_conv2d_backward(Tensor(x), w, p, Tensor(direction))
    return [
        CheckRow("transpose_conv2d grad_x", rel_err(gx.data, fd_grad(f, x)), OP_TOL),
        CheckRow("transpose_conv2d grad_w", rel_err(gw, fd_grad(f, w)), OP_TOL),
        CheckRow("transpose_conv2d grad_b", rel_err(gb, fd_grad(f, b)), OP_TOL),
    ]


def _check_batchnorm(rng) -> list[CheckRow]:
    x = rng.normal(size=(3, 2, 4, 4))
    state = ops.BatchNormState.create(2, dtype=np.float64)
    state.gamma[...] = rng.normal(size=2)
    state.beta[...] = rng.normal(size=2)
    direction = rng.normal(size=x.shape)

    def f():
        return _proj_loss(ops.batchnorm_forward(Tensor(x), state, "train"), direction)

    gx, dgamma, dbeta = ops.batchnorm_backward(Tensor(x), state, Tensor(direction))
    return [
        CheckRow("batchnorm grad_x", rel_err(gx.data, fd_grad(f, x)), OP_TOL),
        CheckRow("batchnorm grad_gamma", rel_err(dgamma, fd_grad(f, state.gamma)), OP_TOL),
        CheckRow("batchnorm grad_beta", rel_err(dbeta, fd_grad(f, state.beta)), OP_TOL),
    ]


def _check_relu(rng) -> list[CheckRow]:
    x = _away_from_zero(rng.normal(size=(2, 3, 5, 5)))
    direction = rng.normal(size=x.shape)

    def f():
        return _proj_loss(ops.relu_forward(Tensor(x)), direction)

    gx = ops.relu_backward(Tensor(x), Tensor(direction))
    return [CheckRow("relu grad_x", rel_err(gx.data, fd_grad(f, x)), OP_TOL)]


def _check_maxpool(rng) -> list[CheckRow]:
    x = _separated_pool_input(rng, (1, 2, 7, 9))
    direction_shape = ops.maxpool_forward(Tensor(x))[0].data.shape
    direction = rng.normal(size=direction_shape)

    def f():
        return _proj_loss(ops.maxpool_forward(Tensor(x))[0], direction)

    _, idx = ops.maxpool_forward(Tensor(x))
    gx = ops.maxpool_backward(idx, Tensor(direction), x.shape[2:])
    return [CheckRow("maxpool grad_x", rel_err(gx.data, fd_grad(f, x)), OP_TOL)]


def _check_cross_entropy(rng) -> list[CheckRow]:
    scores = rng.normal(size=(1, 5, 3, 3))
    labels = rng.integers(0, 6, size=(1, 3, 3))
    if not np.any(labels > 0):
        labels[0, 0, 0] = 1
    alpha = rng.uniform(0.5, 2.0, size=5)

    def f():
        return ops.weighted_softmax_cross_entropy(Tensor(scores), labels, alpha)[0]

    _, grad = ops.weighted_softmax_cross_entropy(Tensor(scores), labels, alpha)
    return [CheckRow("cross_entropy grad_scores",
                     rel_err(grad.data, fd_grad(f, scores)), OP_TOL)]


_OP_CHECKS = (_check_conv, _check_tconv, _check_batchnorm, _check_relu,
              _check_maxpool, _check_cross_entropy)

_UNIT_SPECS = (
    ("bottleneck m8 n16 down2", UnitSpec("bottleneck", 8, 16, "down2", "projection")),
    ("bottleneck m8 n8 keep", UnitSpec("bottleneck", 8, 8, "keep", "identity")),
    ("basic m6 n6 keep", UnitSpec("basic", 6, 6, "keep", "identity")),
    ("basic m6 n8 down2", UnitSpec("basic", 6, 8, "down2", "projection")),
    ("upsample m8 n4", UnitSpec("upsample", 8, 4, "up2", "projection")),
)


def _kink_clearance(unit) -> float:
    """Smallest |pre-activation| cached by the unit's last train forward.

    Central differences are only valid away from the relu corner; inputs
    that park an internal pre-activation within the probe step are redrawn.
    """
    vals = [v.data for v in unit._cache.values() if isinstance(v, Tensor)]
    return min(float(np.abs(v).min()) for v in vals)


def _check_unit(label: str, spec: UnitSpec, rng) -> list[CheckRow]:
    unit = make_unit("unit", spec, rng=rng, dtype=np.float64)
    for _ in range(100):
        x = rng.normal(size=(2, spec.in_channels, 6, 6))
        out = unit.forward(Tensor(x), train=True)
        if _kink_clearance(unit) > 10 * STEP:
            break
    direction = rng.normal(size=out.data.shape)

    def f():
        return _proj_loss(unit.forward(Tensor(x), train=True), direction)

    unit.forward(Tensor(x), train=True)
    for p in unit.params():
        p.zero_grad()
    gx = unit.backward(Tensor(direction))
    rows = [CheckRow(f"{label} grad_x", rel_err(gx.data, fd_grad(f, x)), OP_TOL)]
    for p in unit.params():
        rows.append(CheckRow(f"{label} {p.name}", rel_err(p.grad, fd_grad(f, p.data)), OP_TOL))
    return rows


def check_ops(seeds: int = 20, base_seed: int = 1234) -> list[CheckRow]:
    """Worst case per op across ``seeds`` random draws."""
    worst: dict[str, CheckRow] = {}
    for s in range(seeds):
        rng = np.random.default_rng([base_seed, s])
        for check in _OP_CHECKS:
            for row in check(rng):
                if row.name not in worst or row.max_rel_err > worst[row.name].max_rel_err:
                    worst[row.name] = row
    return list(worst.values())


def check_units(seeds: int = 20, base_seed: int = 4321) -> list[CheckRow]:
    worst: dict[str, CheckRow] = {}
    for s in range(seeds):
        for label, spec in _UNIT_SPECS:
            rng = np.random.default_rng([base_seed, s])
            for row in _check_unit(label, spec, rng):
                if row.name not in worst or row.max_rel_err > worst[row.name].max_rel_err:
                    worst[row.name] = row
    return list(worst.values())


def check_model(n_coords: int = 50, seed: int = 7) -> list[CheckRow]:
    """Sampled finite-difference check of the whole network's gradient."""
    cfg = NetworkConfig.for_depth(50, num_classes=3, height=32, width=32, channel_div=8)
    model = RedNet(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 99])
    # The fresh init is a degenerate point for difference quotients: with
    # batch 1 the 1x1-spatial stages have single-element batch norms whose
    # output is exactly beta = 0, parking relu inputs on the kink.  Randomize
    # the affine parameters so the check runs at a generic point.
    for name, p in model.named_params().items():
        if name.endswith(".gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.data.shape)
        elif name.endswith(".beta"):
            p.data[...] = rng.normal(0.0, 0.5, size=p.data.shape)
    rgb = Tensor(rng.normal(size=(1, 3, 32, 32)))
    depth = Tensor(rng.normal(size=(1, 1, 32, 32)))
    labels = rng.integers(0, 4, size=(1, 32, 32))
    labels[0, 0, 0] = 1
    weights = loss_mod.ClassWeights.uniform(3)
    targets = loss_mod.build_pyramid_targets(labels)

    def f() -> float:
        outs = model.forward(rgb, depth, "train")
        total, _, _ = loss_mod.pyramid_loss(outs, targets, weights)
        return total

    outs = model.forward(rgb, depth, "train")
    total, _, grads = loss_mod.pyramid_loss(outs, targets, weights)
    model.zero_grad()
    model.backward(grads)

    params = list(model.params())
    sizes = np.array([p.data.size for p in params])
    cum = np.cumsum(sizes)
    picks = rng.choice(int(cum[-1]), size=n_coords, replace=False)
    analytic = np.zeros(n_coords)
    numeric = np.zeros(n_coords)
    for j, flat_pick in enumerate(np.sort(picks)):
        pi = int(np.searchsorted(cum, flat_pick, side="right"))
        offset = int(flat_pick - (cum[pi - 1] if pi else 0))
        data = params[pi].data.reshape(-1)
        analytic[j] = params[pi].grad.reshape(-1)[offset]
        keep = data[offset]
        data[offset] = keep + STEP
        hi = f()
        data[offset] = keep - STEP
        lo = f()
        data[offset] = keep
        numeric[j] = (hi - lo) / (2 * STEP)
    return [CheckRow("whole-model sampled gradient", rel_err(analytic, numeric), MODEL_TOL)]


def run(scope: str = "all", seeds: int = 20) -> tuple[list[CheckRow], bool]:
    rows: list[CheckRow] = []
    if scope in ("all", "ops"):
        rows += check_ops(seeds)
    if scope in ("all", "units"):
        rows += check_units(seeds)
    if scope in ("all", "model"):
        rows += check_model()
    if scope not in ("all", "ops", "units", "model"):
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return rows, all(r.ok for r in rows)


def main_table(scope: str = "all", seeds: int = 20) -> tuple[str, bool]:
    t0 = time.perf_counter()
    rows, ok = run(scope, seeds)
    lines = [str(r) for r in rows]
    lines.append(f"{'all passed' if ok else 'FAILURES'} in {time.perf_counter() - t0:.1f}s")
    return "\n".join(lines), ok
