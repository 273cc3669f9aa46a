"""The ``.ten`` binary tensor format.

Layout: ``b"STEN"``, version u8 (=1), rank u8 (=4), four little-endian u32
dimensions, then B*C*H*W little-endian f32 values in row-major order.
Arrays of lower rank are stored with leading unit dimensions.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"STEN"
VERSION = 1
RANK = 4
_HEADER = struct.Struct("<4sBB4I")
HEADER_SIZE = _HEADER.size


class TenFormatError(ValueError):
    pass


def as_rank4(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim > RANK:
        raise TenFormatError(f"only tensors up to rank 4 can be stored, got shape {arr.shape}")
    return arr.reshape((1,) * (RANK - arr.ndim) + arr.shape)


def encode(arr: np.ndarray) -> bytes:
    a = as_rank4(arr)
    for d in a.shape:
        if not 0 <= d < 2 ** 32:
            raise TenFormatError(f"dimension {d} does not fit in u32")
    header = _HEADER.pack(MAGIC, VERSION, RANK, *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < HEADER_SIZE:
        raise TenFormatError(f"truncated header: {len(buf) - offset} bytes available, need {HEADER_SIZE}")
    magic, version, rank, *dims = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise TenFormatError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TenFormatError(f"unsupported .ten version {version}")
    if rank != RANK:
        raise TenFormatError(f"unsupported rank {rank}")
    count = int(np.prod(dims, dtype=np.int64))
    start = offset + HEADER_SIZE
    end = start + 4 * count
    if end > len(buf):
        raise TenFormatError(f"payload holds {(len(buf) - start) // 4} values but header dims {tuple(dims)} need {count}")
    arr = np.frombuffer(buf[start:end], dtype="<f4").astype(np.float32).reshape(dims)
    return arr, end


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode(buf)
    if end != len(buf):
        raise TenFormatError(f"{path}: {len(buf) - end} trailing bytes after payload of shape {arr.shape}")
    return arr
