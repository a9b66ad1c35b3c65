"""Finite-difference suite over every op and residual unit, many seeds.

This file uses the in-test FD oracle from oracles.py for targeted spec
cases; the broader 20-seed sweeps live in rednet.gradcheck and run through
test_acceptance (criterion 1) and the CLI.  Here we pin a smaller seed count
to keep the default test run quick while still exercising every path.
"""

import numpy as np
import pytest
from oracles import fd_gradient, max_rel_err

from rednet import gradcheck, ops
from rednet.blocks import UnitSpec, make_unit
from rednet.tensor import Tensor

SEEDS = 5


@pytest.mark.parametrize("seed", range(SEEDS))
def test_op_gradients(seed):
    rows = gradcheck.check_ops(seeds=1, base_seed=1000 + seed)
    bad = [r for r in rows if not r.ok]
    assert not bad, "\n".join(str(r) for r in bad)


@pytest.mark.parametrize("seed", range(SEEDS))
def test_unit_gradients(seed):
    rows = gradcheck.check_units(seeds=1, base_seed=2000 + seed)
    bad = [r for r in rows if not r.ok]
    assert not bad, "\n".join(str(r) for r in bad)


def test_bottleneck_down2_composite_fd():
    # m=8, n=16, down2: the tiny spec case checked end to end via the
    # independent in-test oracle rather than the package's FD helper
    rng = np.random.default_rng(31)
    unit = make_unit("u", UnitSpec("bottleneck", 8, 16, "down2", "projection"),
                     rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 8, 6, 6))
    direction = rng.normal(size=unit.forward(Tensor(x), True).data.shape)

    def f():
        return float((unit.forward(Tensor(x), True).data * direction).sum())

    unit.forward(Tensor(x), True)
    for p in unit.params():
        p.zero_grad()
    gx = unit.backward(Tensor(direction))
    assert max_rel_err(gx.data, fd_gradient(f, x)) < 1e-4
    for p in unit.params():
        assert max_rel_err(p.grad, fd_gradient(f, p.data)) < 1e-4, p.name


def test_basic_keep_composite_fd():
    rng = np.random.default_rng(32)
    unit = make_unit("u", UnitSpec("basic", 6, 6), rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 6, 5, 5))
    direction = rng.normal(size=(2, 6, 5, 5))

    def f():
        return float((unit.forward(Tensor(x), True).data * direction).sum())

    unit.forward(Tensor(x), True)
    for p in unit.params():
        p.zero_grad()
    gx = unit.backward(Tensor(direction))
    assert max_rel_err(gx.data, fd_gradient(f, x)) < 1e-4


def test_upsample_composite_fd():
    rng = np.random.default_rng(33)
    unit = make_unit("u", UnitSpec("upsample", 8, 4, "up2", "projection"),
                     rng=rng, dtype=np.float64)
    x = rng.normal(size=(1, 8, 4, 4))
    direction = rng.normal(size=(1, 4, 8, 8))

    def f():
        return float((unit.forward(Tensor(x), True).data * direction).sum())

    unit.forward(Tensor(x), True)
    for p in unit.params():
        p.zero_grad()
    gx = unit.backward(Tensor(direction))
    assert max_rel_err(gx.data, fd_gradient(f, x)) < 1e-4
    for p in unit.params():
        assert max_rel_err(p.grad, fd_gradient(f, p.data)) < 1e-4, p.name


def test_whole_model_sampled_gradient():
    rows = gradcheck.check_model()
    assert all(r.ok for r in rows), "\n".join(str(r) for r in rows)


def test_rel_err_helper_floors_tiny_values():
    assert gradcheck.rel_err(np.zeros(3), np.zeros(3)) == 0.0
