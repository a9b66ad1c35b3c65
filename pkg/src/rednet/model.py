"""Full network assembly: dual RGB/depth encoder branches fused by summation
at five stages, 1x1 agent projections (50-layer encoder only), a residual
decoder with four skip sums, and five scoring heads at 1/16, 1/8, 1/4, 1/2,
and full resolution.

The depth branch never consumes fused maps; fusion feeds the RGB branch
only.  Backward is hand-written over this graph, accumulating gradients
where activations fan out (depth stage outputs feed both the next depth
stage and a fusion sum; post-skip maps feed both a head and the next
decoder stage).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .blocks import UnitSpec, make_unit
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d
from .optim import Param
from .tensor import Tensor, elementwise_add

STEM_CHANNELS = 64
ENCODER_UNITS = (3, 4, 6, 3)
DECODER_UNITS = (6, 4, 3, 3, 3)
BOTTLENECK_WIDTHS = (256, 512, 1024, 2048)
BASIC_WIDTHS = (64, 128, 256, 512)
DECODER_PLAN = ((512, 256), (256, 128), (128, 64), (64, 64), (64, 64))
AGENT_CHANNELS = (64, 64, 128, 256, 512)


@dataclass(frozen=True)
class LayerPlan:
    """Channel plan of one residual stage: m input, n output, unit count."""

    m: int
    n: int
    units: int


@dataclass(frozen=True)
class NetworkConfig:
    """Complete wiring of one network instance.

    ``for_depth`` builds the canonical 34/50 plans; ``channel_div`` shrinks
    every width uniformly for desk-scale runs.
    """

    encoder_depth: int
    num_classes: int
    height: int
    width: int
    stem_channels: int
    encoder: tuple[LayerPlan, ...]
    decoder: tuple[LayerPlan, ...]
    agent_channels: tuple[int, ...] | None
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.encoder_depth not in (34, 50):
            raise ConfigError(f"encoder depth must be 34 or 50, got {self.encoder_depth}")
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.height % 32 or self.width % 32 or self.height < 32 or self.width < 32:
            raise ConfigError(
                f"input size must be a positive multiple of 32, got {self.height}x{self.width}"
            )
        if len(self.encoder) != 4 or len(self.decoder) != 5:
            raise ConfigError("expected 4 encoder stages and 5 decoder stages")
        if (self.agent_channels is not None) != (self.encoder_depth == 50):
            raise ConfigError("agent projections exist exactly for the depth-50 encoder")
        if self.agent_channels is not None and len(self.agent_channels) != 5:
            raise ConfigError("expected 5 agent channel counts")
        if self.encoder_depth == 50:
            for plan in self.encoder:
                if plan.n % 4:
                    raise ConfigError(f"bottleneck stage width {plan.n} must divide by 4")

    @classmethod
    def for_depth(cls, encoder_depth: int, num_classes: int, height: int = 480,
                  width: int = 640, channel_div: int = 1, bn_eps: float = 1e-5,
                  bn_momentum: float = 0.1) -> "NetworkConfig":
        if encoder_depth not in (34, 50):
            raise ConfigError(f"encoder depth must be 34 or 50, got {encoder_depth}")
        if channel_div < 1:
            raise ConfigError(f"channel divisor must be >= 1, got {channel_div}")
        widths = BOTTLENECK_WIDTHS if encoder_depth == 50 else BASIC_WIDTHS
        channels = list(widths) + [STEM_CHANNELS] + [c for mn in DECODER_PLAN for c in mn]
        for c in channels:
            if c % channel_div:
                raise ConfigError(f"channel divisor {channel_div} does not divide width {c}")
        if encoder_depth == 50 and (widths[0] // channel_div) % 4:
            raise ConfigError(f"channel divisor {channel_div} breaks bottleneck widths")

        def d(c: int) -> int:
            return c // channel_div

        stem = d(STEM_CHANNELS)
        enc_in = [stem] + [d(c) for c in widths[:-1]]
        encoder = tuple(
            LayerPlan(m, d(n), u) for m, n, u in zip(enc_in, widths, ENCODER_UNITS)
        )
        decoder = tuple(
            LayerPlan(d(m), d(n), u) for (m, n), u in zip(DECODER_PLAN, DECODER_UNITS)
        )
        agents = tuple(d(c) for c in AGENT_CHANNELS) if encoder_depth == 50 else None
        return cls(encoder_depth, num_classes, height, width, stem, encoder, decoder,
                   agents, bn_eps, bn_momentum)


@dataclass
class PyramidOutputs:
    """Score maps at 1/16, 1/8, 1/4, 1/2, and full resolution (out1..final)."""

    out1: Tensor
    out2: Tensor
    out3: Tensor
    out4: Tensor
    final: Tensor

    def as_tuple(self) -> tuple[Tensor, ...]:
        return (self.out1, self.out2, self.out3, self.out4, self.final)


def _fuse(a: Tensor, b: Tensor, junction: str) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"junction {junction}: shapes {tuple(a.shape)} and {tuple(b.shape)} disagree"
        )
    return elementwise_add(a, b)


class _Stage:
    """A sequence of residual units run as one stage."""

    def __init__(self, units):
        self.units = units

    def forward(self, x: Tensor, train: bool) -> Tensor:
        for u in self.units:
            x = u.forward(x, train)
        return x

    def backward(self, g: Tensor) -> Tensor:
        for u in reversed(self.units):
            g = u.backward(g)
        return g

    def params(self):
        for u in self.units:
            yield from u.params()

    def buffers(self):
        for u in self.units:
            yield from u.buffers()


class RedNet:
    """The assembled network.  Construction is deterministic per seed."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        kw = dict(rng=rng, dtype=dtype)
        bnkw = dict(bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        kind = "bottleneck" if config.encoder_depth == 50 else "basic"

        stem = config.stem_channels
        self.conv1 = Conv2d("rgb.conv1", 3, stem, 7, 2, 3, **kw)
        self.bn1 = BatchNorm2d("rgb.bn1", stem, eps=config.bn_eps,
                               momentum=config.bn_momentum, dtype=dtype)
        # depth input is a single-channel map
        self.conv1_d = Conv2d("depth.conv1", 1, stem, 7, 2, 3, **kw)
        self.bn1_d = BatchNorm2d("depth.bn1", stem, eps=config.bn_eps,
                                 momentum=config.bn_momentum, dtype=dtype)

        def enc_stage(prefix: str, plan: LayerPlan, downsample: bool) -> _Stage:
            units = []
            spatial = "down2" if downsample else "keep"
            shortcut = "projection" if (plan.m != plan.n or downsample) else "identity"
            units.append(make_unit(f"{prefix}.0",
                                   UnitSpec(kind, plan.m, plan.n, spatial, shortcut),
                                   **kw, **bnkw))
            for i in range(1, plan.units):
                units.append(make_unit(f"{prefix}.{i}",
                                       UnitSpec(kind, plan.n, plan.n), **kw, **bnkw))
            return _Stage(units)

        # only the first encoder stage keeps resolution
        self.rgb_stages = [
            enc_stage(f"rgb.layer{i + 1}", plan, downsample=i > 0)
            for i, plan in enumerate(config.encoder)
        ]
        self.depth_stages = [
            enc_stage(f"depth.layer{i + 1}", plan, downsample=i > 0)
            for i, plan in enumerate(config.encoder)
        ]

        if config.agent_channels is not None:
            fuse_channels = [stem] + [p.n for p in config.encoder]
            self.agents = [
                Conv2d(f"agent{i}", c_in, c_out, 1, 1, 0, bias=True, **kw)
                for i, (c_in, c_out) in enumerate(zip(fuse_channels, config.agent_channels))
            ]
        else:
            self.agents = None

        def dec_stage(prefix: str, plan: LayerPlan, upsample: bool) -> _Stage:
            units = []
            n_keep = plan.units - 1 if upsample else plan.units
            if not upsample and plan.m != plan.n:
                raise ConfigError(f"{prefix}: non-upsampling stage needs m == n, got {plan}")
            for i in range(n_keep):
                units.append(make_unit(f"{prefix}.{i}",
                                       UnitSpec("basic", plan.m, plan.m), **kw, **bnkw))
            if upsample:
                units.append(make_unit(f"{prefix}.{n_keep}",
                                       UnitSpec("upsample", plan.m, plan.n, "up2", "projection"),
                                       **kw, **bnkw))
            return _Stage(units)

        self.trans = [
            dec_stage(f"trans{i + 1}", plan, upsample=i < 4)
            for i, plan in enumerate(config.decoder)
        ]
        self.heads = [
            Conv2d(f"head{i + 1}", config.decoder[i].n, config.num_classes, 1, 1, 0,
                   bias=True, **kw)
            for i in range(4)
        ]
        self.final_conv = ConvTranspose2d("final_conv", config.decoder[4].n,
                                          config.num_classes, 2, 2, 0, bias=True, **kw)
        self._cache: dict | None = None

    # ------------------------------------------------------------- structure

    def _modules(self):
        yield self.conv1
        yield self.bn1
        yield self.conv1_d
        yield self.bn1_d
        yield from self.rgb_stages
        yield from self.depth_stages
        if self.agents is not None:
            yield from self.agents
        yield from self.trans
        yield from self.heads
        yield self.final_conv

    def params(self):
        for m in self._modules():
            yield from m.params()

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {name: arr for m in self._modules() for name, arr in m.buffers()}

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def load_state(self, params: dict[str, np.ndarray],
                   buffers: dict[str, np.ndarray]) -> None:
        """Copy arrays into the live parameters and running statistics."""
        own = self.named_params()
        if set(params) != set(own):
            missing = set(own) - set(params)
            extra = set(params) - set(own)
            raise ShapeError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, p in own.items():
            p.data[...] = params[name].reshape(p.data.shape).astype(p.data.dtype)
        own_buf = self.named_buffers()
        if set(buffers) != set(own_buf):
            raise ShapeError("buffer set mismatch")
        for name, arr in own_buf.items():
            arr[...] = buffers[name].reshape(arr.shape).astype(arr.dtype)

    # --------------------------------------------------------------- forward

    def _check_inputs(self, rgb: Tensor, depth: Tensor) -> None:
        cfg = self.config
        if rgb.shape.c != 3:
            raise ShapeError(f"junction rgb input: expected 3 channels, got {tuple(rgb.shape)}")
        if depth.shape.c != 1:
            raise ShapeError(f"junction depth input: expected 1 channel, got {tuple(depth.shape)}")
        if rgb.shape.spatial != (cfg.height, cfg.width):
            raise ShapeError(
                f"junction rgb input: expected {cfg.height}x{cfg.width}, "
                f"got {tuple(rgb.shape)}"
            )
        if depth.shape.n != rgb.shape.n or depth.shape.spatial != rgb.shape.spatial:
            raise ShapeError(
                f"junction depth input: shape {tuple(depth.shape)} does not match "
                f"rgb {tuple(rgb.shape)}"
            )
        if rgb.dtype != self.dtype or depth.dtype != self.dtype:
            raise ShapeError(
                f"inputs must be {self.dtype}, got rgb {rgb.dtype} / depth {depth.dtype}"
            )

    def forward(self, rgb: Tensor, depth: Tensor, mode: str = "train") -> PyramidOutputs:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        train = mode == "train"
        self._check_inputs(rgb, depth)
        cache: dict = {}

        z0 = self.bn1.forward(self.conv1.forward(rgb, train), train)
        f0 = ops.relu_forward(z0)
        z0d = self.bn1_d.forward(self.conv1_d.forward(depth, train), train)
        d0 = ops.relu_forward(z0d)
        fuse0 = _fuse(f0, d0, "fuse0")

        pooled, idx = ops.maxpool_forward(fuse0)
        pooled_d, idx_d = ops.maxpool_forward(d0)
        if train:
            cache.update(z0=z0, z0d=z0d, idx=idx, idx_d=idx_d,
                         pool_hw=fuse0.shape.spatial)

        fuses = [fuse0]
        x, xd = pooled, pooled_d
        for i, (rgb_stage, depth_stage) in enumerate(zip(self.rgb_stages, self.depth_stages)):
            x = rgb_stage.forward(x, train)
            xd = depth_stage.forward(xd, train)
            x = _fuse(x, xd, f"fuse{i + 1}")
            fuses.append(x)

        if self.agents is not None:
            skips = [agent.forward(f, train) for agent, f in zip(self.agents, fuses)]
        else:
            skips = fuses

        t = self.trans[0].forward(skips[4], train)
        s1 = _fuse(t, skips[3], "skip trans1+agent3")
        t = self.trans[1].forward(s1, train)
        s2 = _fuse(t, skips[2], "skip trans2+agent2")
        t = self.trans[2].forward(s2, train)
        s3 = _fuse(t, skips[1], "skip trans3+agent1")
        t = self.trans[3].forward(s3, train)
        # the Conv1-level skip exists only alongside the agent projections
        s4 = _fuse(t, skips[0], "skip trans4+agent0") if self.agents is not None else t
        t5 = self.trans[4].forward(s4, train)
        final = self.final_conv.forward(t5, train)

        outs = PyramidOutputs(
            out1=self.heads[0].forward(s1, train),
            out2=self.heads[1].forward(s2, train),
            out3=self.heads[2].forward(s3, train),
            out4=self.heads[3].forward(s4, train),
            final=final,
        )
        self._cache = cache if train else None
        return outs

    # -------------------------------------------------------------- backward

    def backward(self, grads: PyramidOutputs) -> None:
        """Accumulate parameter gradients for the given output gradients."""
        if self._cache is None:
            raise ShapeError("backward without a train-mode forward")
        c = self._cache

        g = self.final_conv.backward(grads.final)
        g_s4 = elementwise_add(self.trans[4].backward(g), self.heads[3].backward(grads.out4))
        g_skip0 = g_s4 if self.agents is not None else None
        g_s3 = elementwise_add(self.trans[3].backward(g_s4), self.heads[2].backward(grads.out3))
        g_s2 = elementwise_add(self.trans[2].backward(g_s3), self.heads[1].backward(grads.out2))
        g_s1 = elementwise_add(self.trans[1].backward(g_s2), self.heads[0].backward(grads.out1))
        g_dec_in = self.trans[0].backward(g_s1)

        if self.agents is not None:
            g_fuse = [
                self.agents[0].backward(g_skip0),
                self.agents[1].backward(g_s3),
                self.agents[2].backward(g_s2),
                self.agents[3].backward(g_s1),
                self.agents[4].backward(g_dec_in),
            ]
        else:
            g_fuse = [None, g_s3, g_s2, g_s1, g_dec_in]

        # encoder: walk stages deep to shallow; each depth stage output feeds
        # both the next depth stage and a fusion sum, so its gradient is the
        # depth-path gradient plus the (skip-augmented) fusion gradient
        g_f = g_fuse[4]
        g_xd = g_f
        for i in (4, 3, 2):
            g_rgb_in = self.rgb_stages[i - 1].backward(g_f)
            g_depth_in = self.depth_stages[i - 1].backward(g_xd)
            g_f = elementwise_add(g_rgb_in, g_fuse[i - 1])
            g_xd = elementwise_add(g_depth_in, g_f)
        g_pool = self.rgb_stages[0].backward(g_f)
        g_pool_d = self.depth_stages[0].backward(g_xd)

        g_fuse0 = ops.maxpool_backward(c["idx"], g_pool, c["pool_hw"])
        if g_fuse[0] is not None:
            g_fuse0 = elementwise_add(g_fuse0, g_fuse[0])
        g_d0 = elementwise_add(ops.maxpool_backward(c["idx_d"], g_pool_d, c["pool_hw"]),
                               g_fuse0)

        g = ops.relu_backward(c["z0"], g_fuse0)
        self.conv1.backward(self.bn1.backward(g))
        g = ops.relu_backward(c["z0d"], g_d0)
        self.conv1_d.backward(self.bn1_d.backward(g))
