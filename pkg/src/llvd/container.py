"""LLVT raw tensor container.

Layout: ``b"LLVT"``, format version (u8), rank (u8), dims (u32 little-endian
each), then float32 little-endian values in row-major order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LLVT"
VERSION = 1


class FormatError(ValueError):
    pass


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise FormatError("rank too large for LLVT")
    head = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_from(stream) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad LLVT magic {magic!r}")
    version, rank = struct.unpack("<BB", _read_exact(stream, 2))
    if version != VERSION:
        raise FormatError(f"unsupported LLVT version {version}")
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank))
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(stream, 4 * count)
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)


def decode(blob: bytes) -> np.ndarray:
    stream = io.BytesIO(blob)
    arr = read_from(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after LLVT payload")
    return arr


def save(path, arr):
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def _read_exact(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated LLVT payload: wanted {n} bytes, got {len(data)}")
    return data
