"""MOET: a minimal binary tensor container.

Layout (all little-endian)::

    b"MOET" | u32 version=1 | u8 dtype (1 = f32) | u8 ndim | ndim x u64 dims | f32 payload

Payload is row-major. Integer-valued arrays (expert ids, token ids) are
stored as f32, which is exact below 2**24.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOET"
VERSION = 1
DTYPE_F32 = 1


class MoetFormatError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    if arr.ndim > 255:
        raise MoetFormatError("too many dimensions")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise MoetFormatError("bad magic")
    if len(buf) < 10:
        raise MoetFormatError("truncated header")
    version, dtype, ndim = struct.unpack_from("<IBB", buf, 4)
    if version != VERSION:
        raise MoetFormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise MoetFormatError(f"unsupported dtype code {dtype}")
    off = 10
    if len(buf) < off + 8 * ndim:
        raise MoetFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != 4 * count:
        raise MoetFormatError(f"payload size {len(buf) - off} does not match dims {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(dims)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
