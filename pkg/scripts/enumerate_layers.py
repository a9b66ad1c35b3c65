#!/usr/bin/env python3
"""Count convolution weight tensors per encoder depth by walking the layer
plans structurally (no network is built).  The results are frozen as
regression constants in tests/test_model.py.

Run:  python3 scripts/enumerate_layers.py
"""

from rednet.model import NetworkConfig


def count_conv_weights(cfg: NetworkConfig) -> int:
    bottleneck = cfg.encoder_depth == 50
    per_unit = 3 if bottleneck else 2

    n = 2  # the two stem convolutions (rgb + depth)
    for i, plan in enumerate(cfg.encoder):
        first_projects = plan.m != plan.n or i > 0  # stage 1 keeps resolution
        stage = plan.units * per_unit + (1 if first_projects else 0)
        n += 2 * stage  # both branches
    if cfg.agent_channels is not None:
        n += len(cfg.agent_channels)
    for i, plan in enumerate(cfg.decoder):
        if i < 4:  # upsample stages: keep units + one 3-conv upsample unit
            n += (plan.units - 1) * 2 + 3
        else:
            n += plan.units * 2
    n += 4  # side heads
    n += 1  # final transposed convolution
    return n


def main() -> None:
    for depth in (50, 34):
        cfg = NetworkConfig.for_depth(depth, num_classes=37)
        print(f"encoder depth {depth}: {count_conv_weights(cfg)} conv weight tensors")


if __name__ == "__main__":
    main()
