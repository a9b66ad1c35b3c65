"""Dataset ingestion, augmentation, normalization, and a synthetic RGB-D
scene generator for desk-scale training.

File formats are deliberately primitive: RGB as binary PPM (P6, maxval 255),
depth as binary PGM (P5, maxval 65535, big-endian as PNM mandates), label
maps as int32 RTEN tensors stored (1, 1, H, W).  A manifest is a TSV of
``rgb\tdepth\tlabel`` paths with a ``#classes=N`` header, paths relative to
the manifest's directory.

Geometric transforms hit rgb, depth, and labels identically (rgb bilinear,
depth and labels nearest); photometric jitter touches rgb only.  All
randomness flows through the caller-supplied generator.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import ops
from .errors import DataError, ShapeError
from .tensor import rten_read, rten_write

IGNORE_INDEX = 0


# ------------------------------------------------------------------- PNM files


def _read_pnm_tokens(buf: bytes, count: int, path) -> tuple[list[int], int]:
    """Read ``count`` whitespace/comment-separated integers after the magic."""
    values: list[int] = []
    pos = 2  # past the 2-byte magic
    while len(values) < count:
        if pos >= len(buf):
            raise DataError(f"{path}: truncated header at offset {pos}")
        ch = buf[pos : pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            eol = buf.find(b"\n", pos)
            if eol == -1:
                raise DataError(f"{path}: unterminated comment at offset {pos}")
            pos = eol + 1
        elif ch.isdigit():
            m = re.match(rb"\d+", buf[pos:])
            values.append(int(m.group()))
            pos += m.end()
        else:
            raise DataError(f"{path}: unexpected byte {ch!r} at offset {pos}")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise DataError(f"{path}: missing whitespace before raster at offset {pos}")
    return values, pos + 1


def _read_pnm(path, magic: bytes):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != magic:
        raise DataError(f"{path}: bad magic {buf[:2]!r} at offset 0 (expected {magic!r})")
    (w, h, maxval), offset = _read_pnm_tokens(buf, 3, path)
    if w < 1 or h < 1:
        raise DataError(f"{path}: non-positive image size {w}x{h}")
    channels = 3 if magic == b"P6" else 1
    if maxval == 255:
        dtype, itemsize = np.dtype(">u1"), 1
    elif maxval == 65535:
        dtype, itemsize = np.dtype(">u2"), 2
    else:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    need = w * h * channels * itemsize
    if len(buf) - offset != need:
        raise DataError(
            f"{path}: raster has {len(buf) - offset} bytes, expected {need}, "
            f"at offset {offset}"
        )
    raster = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=offset)
    return raster.reshape(h, w, channels), maxval


def read_ppm(path) -> np.ndarray:
    """8-bit binary PPM to a (3, H, W) float32 array in [0, 1]."""
    raster, maxval = _read_pnm(path, b"P6")
    if maxval != 255:
        raise DataError(f"{path}: RGB images must be 8-bit, got maxval {maxval}")
    return (raster.astype(np.float32) / 255.0).transpose(2, 0, 1)


def read_pgm16(path) -> np.ndarray:
    """16-bit binary PGM to a (1, H, W) float32 array in [0, 1]."""
    raster, maxval = _read_pnm(path, b"P5")
    if maxval != 65535:
        raise DataError(f"{path}: depth maps must be 16-bit, got maxval {maxval}")
    return (raster.astype(np.float32) / 65535.0).transpose(2, 0, 1)


def write_ppm(path, rgb01: np.ndarray) -> None:
    rgb01 = np.asarray(rgb01)
    if rgb01.ndim != 3 or rgb01.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) rgb, got {rgb01.shape}")
    raster = np.rint(np.clip(rgb01, 0.0, 1.0) * 255).astype(">u1").transpose(1, 2, 0)
    h, w = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(raster.tobytes())


def write_pgm16(path, depth01: np.ndarray) -> None:
    depth01 = np.asarray(depth01)
    if depth01.ndim != 3 or depth01.shape[0] != 1:
        raise ShapeError(f"expected (1, H, W) depth, got {depth01.shape}")
    raster = np.rint(np.clip(depth01, 0.0, 1.0) * 65535).astype(">u2")[0]
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(raster.tobytes())


def write_pgm8(path, values: np.ndarray) -> None:
    """8-bit PGM of raw integer values, used for argmax visualizations."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"expected an (H, W) map, got {values.shape}")
    if values.min() < 0 or values.max() > 255:
        raise ShapeError("values must fit in one byte")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(values.astype(">u1").tobytes())


# ------------------------------------------------------------ samples/manifest


@dataclass
class Sample:
    """One scene: rgb (3,H,W) in [0,1] until normalized, depth (1,H,W),
    integer labels (H,W) with 0 = unlabeled."""

    rgb: np.ndarray
    depth: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        hw = self.labels.shape
        if self.rgb.shape != (3, *hw) or self.depth.shape != (1, *hw):
            raise ShapeError(
                f"sample shapes disagree: rgb {self.rgb.shape}, depth "
                f"{self.depth.shape}, labels {self.labels.shape}"
            )

    @property
    def hw(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class ManifestRecord:
    rgb_path: Path
    depth_path: Path
    label_path: Path


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    num_classes: int
    tag: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        base = path.parent
        records = []
        num_classes = None
        tag = ""
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].partition("=")
                    if key == "classes":
                        num_classes = int(value)
                    elif key == "split":
                        tag = value
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 3 tab-separated paths")
                records.append(ManifestRecord(*(base / p for p in parts)))
        if num_classes is None:
            raise DataError(f"{path}: missing '#classes=N' header")
        if num_classes < 2:
            raise DataError(f"{path}: need at least 2 classes, got {num_classes}")
        return cls(records, num_classes, tag)

    def write(self, path) -> None:
        path = Path(path)
        base = path.parent
        with open(path, "w") as fh:
            fh.write(f"#classes={self.num_classes}\n")
            if self.tag:
                fh.write(f"#split={self.tag}\n")
            for r in self.records:
                row = "\t".join(
                    str(p.relative_to(base)) if p.is_absolute() else str(p)
                    for p in (r.rgb_path, r.depth_path, r.label_path)
                )
                fh.write(row + "\n")

    def validate(self) -> None:
        for r in self.records:
            for p in (r.rgb_path, r.depth_path, r.label_path):
                if not Path(p).is_file():
                    raise DataError(f"manifest references missing file {p}")


def load_sample(record: ManifestRecord) -> Sample:
    rgb = read_ppm(record.rgb_path)
    depth = read_pgm16(record.depth_path)
    raw = rten_read(record.label_path)
    if raw.dtype != np.int32 or raw.shape[:2] != (1, 1):
        raise DataError(
            f"{record.label_path}: labels must be an int32 (1, 1, H, W) tensor, "
            f"got {raw.dtype} {raw.shape}"
        )
    labels = raw[0, 0]
    if rgb.shape[1:] != labels.shape or depth.shape[1:] != labels.shape:
        raise DataError(
            f"sample sizes disagree: rgb {rgb.shape[1:]}, depth {depth.shape[1:]}, "
            f"labels {labels.shape} ({record.rgb_path})"
        )
    return Sample(rgb, depth, labels)


def save_sample(sample: Sample, rgb_path, depth_path, label_path) -> None:
    write_ppm(rgb_path, sample.rgb)
    write_pgm16(depth_path, sample.depth)
    rten_write(label_path, sample.labels[None, None].astype(np.int32))


# ------------------------------------------------------- resize, augment, stats


def resize_sample(sample: Sample, out_h: int, out_w: int) -> Sample:
    """rgb bilinear; depth and labels nearest-neighbor."""
    if (out_h, out_w) == sample.hw:
        return sample
    return Sample(
        rgb=ops.resize_bilinear_array(sample.rgb, out_h, out_w),
        depth=ops.resize_nearest_array(sample.depth, out_h, out_w),
        labels=ops.resize_nearest_array(sample.labels, out_h, out_w),
    )


@dataclass(frozen=True)
class AugmentConfig:
    """Jitter magnitudes; collapse the ranges to disable a component."""

    scale_min: float = 1.0
    scale_max: float = 1.4
    brightness: float = 0.1
    saturation: float = 0.1
    hue: float = 0.05


def augment(sample: Sample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> Sample:
    """Random scale-and-crop of all three maps, then rgb-only HSV jitter.

    Draw order is fixed (scale, crop y, crop x, brightness, saturation, hue)
    so a given generator state always yields the same transform.
    """
    h, w = sample.hw
    scale_ = rng.uniform(cfg.scale_min, cfg.scale_max)
    nh, nw = int(round(h * scale_)), int(round(w * scale_))
    oy = int(rng.integers(0, nh - h + 1))
    ox = int(rng.integers(0, nw - w + 1))
    fb = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
    fs = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
    dh = rng.uniform(-cfg.hue, cfg.hue)

    out = resize_sample(sample, nh, nw)
    if (oy, ox) != (0, 0) or out.hw != (h, w):
        out = Sample(
            rgb=out.rgb[:, oy : oy + h, ox : ox + w],
            depth=out.depth[:, oy : oy + h, ox : ox + w],
            labels=out.labels[oy : oy + h, ox : ox + w],
        )
    if fb != 1.0 or fs != 1.0 or dh != 0.0:
        hsv = rgb_to_hsv(np.clip(out.rgb, 0.0, 1.0).transpose(1, 2, 0))
        hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * fs, 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] * fb, 0.0, 1.0)
        rgb = hsv_to_rgb(hsv).transpose(2, 0, 1).astype(np.float32)
        out = replace(out, rgb=np.clip(rgb, 0.0, 1.0))
    return out


@dataclass(frozen=True)
class DatasetStats:
    """Per-channel mean/std for rgb (3) and depth (1), float64."""

    rgb_mean: np.ndarray
    rgb_std: np.ndarray
    depth_mean: np.ndarray
    depth_std: np.ndarray
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, str]:
        fmt = lambda a: ",".join(repr(float(v)) for v in a)
        return {
            "rgb_mean": fmt(self.rgb_mean),
            "rgb_std": fmt(self.rgb_std),
            "depth_mean": fmt(self.depth_mean),
            "depth_std": fmt(self.depth_std),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "DatasetStats":
        parse = lambda s: np.array([float(v) for v in s.split(",")], dtype=np.float64)
        return cls(parse(d["rgb_mean"]), parse(d["rgb_std"]),
                   parse(d["depth_mean"]), parse(d["depth_std"]))


def compute_stats(manifest: DatasetManifest) -> DatasetStats:
    """Two-pass per-channel mean and standard deviation in double precision.

    Channels with std below 1e-12 are guarded to 1 and flagged.
    """
    if not manifest.records:
        raise DataError("cannot compute statistics of an empty manifest")
    sums = np.zeros(4)
    count = 0
    for r in manifest.records:
        s = load_sample(r)
        sums[:3] += s.rgb.sum(axis=(1, 2), dtype=np.float64)
        sums[3] += s.depth.sum(dtype=np.float64)
        count += s.rgb.shape[1] * s.rgb.shape[2]
    mean = sums / count
    sq = np.zeros(4)
    for r in manifest.records:
        s = load_sample(r)
        sq[:3] += ((s.rgb.astype(np.float64) - mean[:3, None, None]) ** 2).sum(axis=(1, 2))
        sq[3] += ((s.depth.astype(np.float64) - mean[3]) ** 2).sum()
    std = np.sqrt(sq / count)
    degenerate = []
    for i, name in enumerate(("rgb_r", "rgb_g", "rgb_b", "depth")):
        if std[i] < 1e-12:
            std[i] = 1.0
            degenerate.append(name)
    return DatasetStats(mean[:3], std[:3], mean[3:], std[3:], tuple(degenerate))


def normalize(sample: Sample, stats: DatasetStats) -> Sample:
    """(x - mean) / std per channel for rgb and depth; labels untouched."""
    rgb = (sample.rgb - stats.rgb_mean[:, None, None]) / stats.rgb_std[:, None, None]
    depth = (sample.depth - stats.depth_mean[:, None, None]) / stats.depth_std[:, None, None]
    return Sample(rgb.astype(np.float32), depth.astype(np.float32), sample.labels)


# ------------------------------------------------------------- synthetic scenes


def _class_palette(num_classes: int) -> np.ndarray:
    """Deterministic distinct base color per class id, via evenly spaced hues."""
    hues = (np.arange(num_classes) / num_classes)[:, None]
    hsv = np.concatenate([hues, np.full_like(hues, 0.65), np.full_like(hues, 0.85)], axis=1)
    return hsv_to_rgb(hsv)


def synth_generate(n_samples: int, height: int, width: int, num_classes: int,
                   seed: int, out_dir) -> DatasetManifest:
    """Write color-and-depth-keyed rectangle scenes plus a manifest.

    Each scene is a constant-depth background plane of class 1 and 2..5
    axis-aligned rectangles of classes 2..N_c, every rectangle strictly
    nearer than the background and painted far to near, so occlusion and the
    depth/label boundary correspondence are consistent.  Per-sample
    randomness derives from (seed, sample index).
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if n_samples < 1:
        raise ValueError(f"need at least 1 sample, got {n_samples}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    palette = _class_palette(num_classes)
    records = []
    for index in range(n_samples):
        rng = np.random.default_rng([seed, index])
        bg_depth = rng.uniform(0.78, 0.95)
        bg_tint = rng.uniform(-0.04, 0.04, size=3)
        rgb = np.clip(palette[0][:, None, None] + bg_tint[:, None, None], 0, 1)
        rgb = np.broadcast_to(rgb, (3, height, width)).copy()
        depth = np.full((1, height, width), bg_depth)
        labels = np.ones((height, width), dtype=np.int32)

        # one depth per class per scene so depth discontinuities always
        # coincide with label boundaries, even for overlapping rectangles
        class_depth = {c: rng.uniform(0.25, 0.70) for c in range(2, num_classes + 1)}
        rects = []
        for _ in range(int(rng.integers(2, 6))):
            cls = int(rng.integers(2, num_classes + 1)) if num_classes > 2 else 2
            z = class_depth[cls]
            rw = int(rng.integers(max(width // 6, 2), max(width // 2, 3)))
            rh = int(rng.integers(max(height // 6, 2), max(height // 2, 3)))
            x0 = int(rng.integers(0, width - rw + 1))
            y0 = int(rng.integers(0, height - rh + 1))
            tint = rng.uniform(-0.05, 0.05, size=3)
            rects.append((z, cls, y0, x0, rh, rw, tint))
        for z, cls, y0, x0, rh, rw, tint in sorted(rects, key=lambda r: -r[0]):
            color = np.clip(palette[cls - 1] + tint, 0, 1)
            rgb[:, y0 : y0 + rh, x0 : x0 + rw] = color[:, None, None]
            depth[:, y0 : y0 + rh, x0 : x0 + rw] = z
            labels[y0 : y0 + rh, x0 : x0 + rw] = cls

        rgb = np.clip(rgb + rng.normal(0.0, 0.01, size=rgb.shape), 0, 1)
        sample = Sample(rgb.astype(np.float32), depth.astype(np.float32), labels)
        paths = (out_dir / f"sample_{index:04d}_rgb.ppm",
                 out_dir / f"sample_{index:04d}_depth.pgm",
                 out_dir / f"sample_{index:04d}_labels.rten")
        save_sample(sample, *paths)
        records.append(ManifestRecord(*paths))

    manifest = DatasetManifest(records, num_classes, tag="synthetic")
    manifest.write(out_dir / "manifest.tsv")
    return manifest
