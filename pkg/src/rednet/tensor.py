"""Rank-4 NCHW tensor values and the RTEN file format.

Every feature map in the network is a dense rank-4 array in contiguous
row-major batch -> channel -> row -> column order, so element (n, c, h, w)
lives at flat offset ((n*C + c)*H + h)*W + w.  Training runs in float32;
finite-difference work runs in float64.

Tensors are immutable by convention: operations allocate fresh output
buffers and never alias their inputs.  The one sanctioned exception is the
optimizer's in-place parameter update, which works on raw arrays.
"""

from __future__ import annotations

import struct
from typing import NamedTuple

import numpy as np

from .errors import DataError, ShapeError

__all__ = [
    "Shape",
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "full",
    "elementwise_add",
    "scale",
    "reduce_sum",
    "reduce_mean",
    "rten_encode",
    "rten_decode",
    "rten_write",
    "rten_read",
]

# shape products must stay addressable by a signed 64-bit index
_MAX_INDEX = 2**63 - 1

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Shape(NamedTuple):
    """(batch, channels, height, width) with flat-index helpers."""

    n: int
    c: int
    h: int
    w: int

    @property
    def spatial(self) -> tuple[int, int]:
        return self.h, self.w

    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def flat_index(self, n: int, c: int, h: int, w: int) -> int:
        return ((n * self.c + c) * self.h + h) * self.w + w

    def validate(self) -> None:
        if any(d < 1 for d in self):
            raise ShapeError(f"all dimensions must be >= 1, got {tuple(self)}")
        if self.size() > _MAX_INDEX:
            raise ShapeError(f"shape product overflows the index type: {tuple(self)}")


class Tensor:
    """Dense rank-4 value in NCHW layout, float32 or float64."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensor rank must be 4, got shape {arr.shape}")
        if arr.dtype not in FLOAT_DTYPES:
            raise ShapeError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        Shape(*arr.shape).validate()
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.dtype})"


def tensor(data, dtype=None) -> Tensor:
    """Build a Tensor from array-like data, optionally casting."""
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def zeros(n: int, c: int, h: int, w: int, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((n, c, h, w), dtype=dtype))


def ones(n: int, c: int, h: int, w: int, dtype=np.float32) -> Tensor:
    return Tensor(np.ones((n, c, h, w), dtype=dtype))


def full(n: int, c: int, h: int, w: int, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((n, c, h, w), value, dtype=dtype))


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"operand shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    if a.dtype != b.dtype:
        raise ShapeError(f"operand dtypes differ: {a.dtype} vs {b.dtype}")


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """out[i] = a[i] + b[i]; left-operand order, fresh buffer."""
    _check_same(a, b)
    return Tensor(a.data + b.data)


def scale(a: Tensor, s: float) -> Tensor:
    """out[i] = s * a[i]."""
    return Tensor(a.data * a.dtype.type(s))


def reduce_sum(a: Tensor) -> float:
    """Strict left-to-right accumulation over the flat buffer.

    The summation order is part of the contract: the result matches a naive
    scalar loop bit for bit in double precision.  builtin sum() over Python
    floats performs exactly that left-to-right IEEE double accumulation.
    """
    return float(sum(a.data.reshape(-1).tolist(), 0.0))


def reduce_mean(a: Tensor) -> float:
    return reduce_sum(a) / a.size


# ---------------------------------------------------------------------------
# RTEN: raw tensor file format
#
#   magic "RTEN" | u8 version=1 | u8 dtype code | 4x u64 little-endian dims
#   | raw little-endian buffer
#
# dtype codes: 1 = float32, 2 = float64, 3 = int32 (label maps, count
# matrices).  Only the float codes construct Tensor values; int32 payloads
# are returned as plain arrays.
# ---------------------------------------------------------------------------

_RTEN_MAGIC = b"RTEN"
_RTEN_VERSION = 1
_RTEN_HEADER = struct.Struct("<4sBB4Q")
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4")}
_DTYPE_TO_CODE = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.int32): 3,
}


def rten_encode(arr: np.ndarray) -> bytes:
    """Serialize a rank-4 array (f32, f64, or i32) to RTEN bytes."""
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise ShapeError(f"RTEN stores rank-4 arrays, got shape {arr.shape}")
    code = _DTYPE_TO_CODE.get(np.dtype(arr.dtype.name))
    if code is None:
        raise ShapeError(f"RTEN cannot store dtype {arr.dtype}")
    Shape(*arr.shape).validate()
    header = _RTEN_HEADER.pack(_RTEN_MAGIC, _RTEN_VERSION, code, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODE_TO_DTYPE[code]).tobytes()
    return header + payload


def rten_decode(buf: bytes, source: str = "<memory>") -> np.ndarray:
    """Parse RTEN bytes; errors carry the source name and byte offset."""
    if len(buf) < _RTEN_HEADER.size:
        raise DataError(f"{source}: truncated RTEN header at offset {len(buf)}")
    magic, version, code, n, c, h, w = _RTEN_HEADER.unpack_from(buf)
    if magic != _RTEN_MAGIC:
        raise DataError(f"{source}: bad magic {magic!r} at offset 0")
    if version != _RTEN_VERSION:
        raise DataError(f"{source}: unsupported RTEN version {version} at offset 4")
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise DataError(f"{source}: unknown dtype code {code} at offset 5")
    shape = Shape(n, c, h, w)
    try:
        shape.validate()
    except ShapeError as exc:
        raise DataError(f"{source}: invalid dims at offset 6: {exc}") from exc
    expected = _RTEN_HEADER.size + shape.size() * dtype.itemsize
    if len(buf) != expected:
        raise DataError(
            f"{source}: payload length {len(buf) - _RTEN_HEADER.size} does not "
            f"match dims {tuple(shape)} (expected {expected - _RTEN_HEADER.size}), "
            f"at offset {_RTEN_HEADER.size}"
        )
    arr = np.frombuffer(buf, dtype=dtype, offset=_RTEN_HEADER.size).reshape(tuple(shape))
    # native byte order, writable copy
    return arr.astype(dtype.newbyteorder("="), copy=True)


def rten_write(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(rten_encode(arr))


def rten_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return rten_decode(buf, source=str(path))
