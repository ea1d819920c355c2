"""GZT1 binary tensor format.

Layout: ``b"GZT1"``, one dtype byte (0 = float32, 1 = float64), one rank byte,
``rank`` little-endian uint32 extents, then the little-endian row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GZT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_BY_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    """Raised for malformed or truncated GZT1/GZCK content; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def encode(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    code = _BY_DTYPE.get(arr.dtype)
    if code is None:
        raise ValueError(f"GZT1 supports float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("GZT1 rank limited to 255")
    head = MAGIC + bytes([code, arr.ndim]) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor at ``offset``; return it and the offset just past it."""
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad GZT1 magic", offset)
    if len(buf) < offset + 6:
        raise FormatError("truncated GZT1 header", len(buf))
    code, ndim = buf[offset + 4], buf[offset + 5]
    if code not in _CODES:
        raise FormatError(f"unknown GZT1 dtype code {code}", offset + 4)
    pos = offset + 6
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated GZT1 shape", len(buf))
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated GZT1 payload, expected {nbytes} bytes", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return arr.reshape(shape).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after GZT1 tensor", end)
    return arr
