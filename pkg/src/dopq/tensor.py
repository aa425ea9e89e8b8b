"""Dense float64 tensors, channel statistics and the DQT1 binary container.

Tensors are plain ``numpy.ndarray`` objects (row-major, float64). Integer
codes are int32 arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import DimensionError, DomainError

Tensor = np.ndarray

DQT1_MAGIC = b"DQT1"
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}
_HEADER = struct.Struct("<4sBB2x")


def as_tensor(x) -> Tensor:
    """Convert to a C-contiguous float64 array, rejecting non-finite values."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains NaN or Inf")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., M, K] @ b[K, N]`` in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 1 or b.ndim != 2:
        raise DimensionError(f"matmul expects a[..., K] and b[K, N], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


@dataclass(frozen=True)
class ChannelStats:
    min: np.ndarray
    max: np.ndarray
    axis: int

    def __post_init__(self):
        if self.min.shape != self.max.shape:
            raise DimensionError("min/max length mismatch")
        if np.any(self.min > self.max):
            raise DomainError("channel min exceeds max")


def channel_minmax(x: Tensor, axis: int) -> ChannelStats:
    """Per-channel min and max over every element sharing a channel index."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("channel_minmax of an empty tensor")
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, -1).reshape(-1, x.shape[axis])
    return ChannelStats(moved.min(axis=0), moved.max(axis=0), axis)


def median(v) -> float:
    """Middle element; the mean of the two middle elements for even length."""
    v = np.sort(np.asarray(v, dtype=np.float64).ravel())
    n = v.size
    if n == 0:
        raise DomainError("median of an empty vector")
    if n % 2:
        return float(v[n // 2])
    return float((v[n // 2 - 1] + v[n // 2]) / 2.0)


def mean_abs_dev(v, center: float) -> float:
    """(1/D) * sum |v_i - center|."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("mean_abs_dev of an empty vector")
    return float(np.mean(np.abs(v - center)))


# --- DQT1 container -------------------------------------------------------

PathLike = Union[str, Path]


def dqt1_dumps(t: np.ndarray) -> bytes:
    """Serialize a float64 or int32 array to DQT1 bytes."""
    t = np.asarray(t)
    if t.dtype == np.float64:
        code = 0
    elif t.dtype == np.int32:
        code = 1
    else:
        raise DomainError(f"DQT1 stores float64 or int32, not {t.dtype}")
    if t.ndim > 255:
        raise DimensionError("DQT1 supports at most 255 dimensions")
    head = _HEADER.pack(DQT1_MAGIC, code, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPE_CODES[code]).tobytes()
    return head + dims + payload


def dqt1_loads(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DomainError("truncated DQT1 header")
    magic, code, ndim = _HEADER.unpack_from(buf, 0)
    if magic != DQT1_MAGIC:
        raise DomainError(f"bad DQT1 magic {magic!r}")
    if code not in _DTYPE_CODES:
        raise DomainError(f"unknown DQT1 dtype code {code}")
    off = _HEADER.size
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) - off != count * dtype.itemsize:
        raise DomainError("DQT1 payload size does not match header")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
    native = np.float64 if code == 0 else np.int32
    return arr.astype(native).reshape(shape)


def write_dqt1(path_or_file: PathLike | BinaryIO, t: np.ndarray) -> None:
    data = dqt1_dumps(t)
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        Path(path_or_file).write_bytes(data)


def read_dqt1(path_or_file: PathLike | BinaryIO) -> np.ndarray:
    if hasattr(path_or_file, "read"):
        return dqt1_loads(path_or_file.read())
    return dqt1_loads(Path(path_or_file).read_bytes())
