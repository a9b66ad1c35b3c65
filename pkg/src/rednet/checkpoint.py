"""Checkpoint container: an indexed archive of RTEN tensors plus a text
metadata block, with a trailing CRC32 over the whole payload.

Layout:
    magic "RCKP" | u8 version=1
    u64 metadata length | metadata utf-8 ("key=value" lines)
    u64 tensor count | per tensor: u16 name length | name | u64 size | RTEN bytes
    u32 CRC32 (zlib) of every preceding byte

Arrays of any rank are stored; non-rank-4 arrays are packed as (1, len, 1, 1)
and restored to their declared shape by the caller (parameter shapes are
known from the model), so round trips are bit exact.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetStats
from .errors import DataError
from .tensor import rten_decode, rten_encode

_MAGIC = b"RCKP"
_VERSION = 1


def _pack4(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 4:
        return arr
    return arr.reshape(1, arr.size, 1, 1)


def save_archive(path, metadata: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    chunks = [_MAGIC, struct.pack("<B", _VERSION)]
    meta = "".join(f"{k}={v}\n" for k, v in metadata.items()).encode()
    chunks.append(struct.pack("<Q", len(meta)))
    chunks.append(meta)
    chunks.append(struct.pack("<Q", len(tensors)))
    for name, arr in tensors.items():
        blob = rten_encode(_pack4(np.asarray(arr)))
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<Q", len(blob)))
        chunks.append(blob)
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_archive(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 + 1 + 8 + 8 + 4:
        raise DataError(f"{path}: truncated checkpoint ({len(buf)} bytes)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise DataError(f"{path}: checksum mismatch, file is corrupt")
    if body[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic {body[:4]!r}")
    version = body[4]
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 5
    (meta_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    metadata: dict[str, str] = {}
    for line in body[pos : pos + meta_len].decode().splitlines():
        if line:
            key, _, value = line.partition("=")
            metadata[key] = value
    pos += meta_len
    (count,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode()
        pos += name_len
        (size,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        tensors[name] = rten_decode(body[pos : pos + size], source=f"{path}:{name}")
        pos += size
    if pos != len(body):
        raise DataError(f"{path}: {len(body) - pos} trailing bytes after tensor index")
    return metadata, tensors


@dataclass
class Checkpoint:
    """Everything needed to resume: config, weights, stats, optimizer, epoch."""

    config: dict[str, str]
    epoch: int
    seed: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    stats: DatasetStats | None = None
    extra: dict[str, str] = field(default_factory=dict)


_PREFIXES = {"params": "p/", "buffers": "b/", "velocity": "v/"}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    metadata = {"epoch": str(ckpt.epoch), "seed": str(ckpt.seed)}
    if ckpt.stats is not None:
        metadata.update({f"stats.{k}": v for k, v in ckpt.stats.to_dict().items()})
    metadata.update({f"config.{k}": v for k, v in ckpt.config.items()})
    metadata.update({f"extra.{k}": v for k, v in ckpt.extra.items()})
    tensors: dict[str, np.ndarray] = {}
    for group, prefix in _PREFIXES.items():
        for name, arr in getattr(ckpt, group).items():
            tensors[prefix + name] = arr
    save_archive(path, metadata, tensors)


def load_checkpoint(path) -> Checkpoint:
    metadata, tensors = load_archive(path)
    try:
        epoch = int(metadata["epoch"])
        seed = int(metadata["seed"])
    except KeyError as exc:
        raise DataError(f"{path}: missing metadata key {exc}") from exc
    stats_keys = {k[6:]: v for k, v in metadata.items() if k.startswith("stats.")}
    stats = DatasetStats.from_dict(stats_keys) if stats_keys else None
    config = {k[7:]: v for k, v in metadata.items() if k.startswith("config.")}
    extra = {k[6:]: v for k, v in metadata.items() if k.startswith("extra.")}
    groups = {g: {} for g in _PREFIXES}
    for name, arr in tensors.items():
        for group, prefix in _PREFIXES.items():
            if name.startswith(prefix):
                groups[group][name[len(prefix):]] = arr
                break
        else:
            raise DataError(f"{path}: unexpected tensor {name!r}")
    return Checkpoint(config, epoch, seed, groups["params"], groups["buffers"],
                      groups["velocity"], stats, extra)
