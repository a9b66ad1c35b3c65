"""Flat ``key = value`` run configuration covering every tunable.

Defaults follow the published training recipe: 480x640 inputs, learning rate
0.002 decayed by 0.8 every 100 epochs, momentum 0.9, weight decay 0.0004,
batch size 5.  Unknown keys are rejected; every run writes its resolved
config next to its outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .data import AugmentConfig
from .errors import ConfigError
from .model import NetworkConfig


@dataclass
class RunConfig:
    # model
    encoder_depth: int = 50
    num_classes: int = 37
    height: int = 480
    width: int = 640
    channel_div: int = 1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    # optimization
    base_lr: float = 0.002
    lr_decay: float = 0.8
    lr_decay_every: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0004
    batch_size: int = 5
    epochs: int = 300
    seed: int = 0
    pyramid: bool = True
    early_stop_rel: float = 1e-4
    early_stop_patience: int = 50
    checkpoint_every: int = 50
    # data
    manifest: str = ""
    val_manifest: str = ""
    augment: bool = True
    aug_scale_min: float = 1.0
    aug_scale_max: float = 1.4
    aug_brightness: float = 0.1
    aug_saturation: float = 0.1
    aug_hue: float = 0.05

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.encoder_depth not in (34, 50):
            raise ConfigError(f"encoder_depth must be 34 or 50, got {self.encoder_depth}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("optimizer hyperparameters must be non-negative")
        if not (0 < self.lr_decay <= 1) or self.lr_decay_every < 1:
            raise ConfigError("lr decay must be in (0, 1] applied every >= 1 epochs")
        if self.aug_scale_min < 1.0 or self.aug_scale_max < self.aug_scale_min:
            raise ConfigError("augmentation scale range must satisfy 1 <= min <= max")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        # delegates the H/W/channel checks
        self.network_config()

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.for_depth(
            self.encoder_depth, self.num_classes, self.height, self.width,
            self.channel_div, self.bn_eps, self.bn_momentum,
        )

    def aug_config(self) -> AugmentConfig:
        return AugmentConfig(self.aug_scale_min, self.aug_scale_max,
                             self.aug_brightness, self.aug_saturation, self.aug_hue)

    # ------------------------------------------------------------- text form

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = repr(v) if isinstance(v, float) else str(v)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "RunConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = parse_flat_config(path)
        if overrides:
            for key, raw in overrides.items():
                values[key] = raw
        return cls.from_dict(values)


def _coerce(key: str, raw: str, typ) -> object:
    raw = raw.strip()
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "int":
            return int(raw)
        if name == "float":
            return float(raw)
        if name == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {name}") from exc


def parse_flat_config(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment, blank lines skipped."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
    return values


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    """Parse repeated --set key=value arguments."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out
