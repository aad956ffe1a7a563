"""Binary tensor blobs: 8-byte magic, uint32 rank, rank x uint64 extents, float64 data.

All fields little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GEOLABT1"


class BlobError(ValueError):
    pass


def to_bytes(array) -> bytes:
    a = np.array(array, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``; returns the array and the end offset."""
    if buf[offset:offset + 8] != MAGIC:
        raise BlobError(f"bad magic at offset {offset}")
    if len(buf) < offset + 12:
        raise BlobError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, offset + 8)
    pos = offset + 12
    if len(buf) < pos + 8 * rank:
        raise BlobError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 8 * n
    if len(buf) < end:
        raise BlobError(f"truncated data: need {end - pos} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
    return arr, end


def save_tensor(path, array) -> None:
    Path(path).write_bytes(to_bytes(array))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = from_bytes(buf)
    if end != len(buf):
        raise BlobError(f"{path}: {len(buf) - end} trailing bytes")
    return arr
