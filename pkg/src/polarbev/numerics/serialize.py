"""Little-endian binary tensor format.

Layout: ``b"TNSR"``, u32 version, u32 rank, rank x u64 extents, u32 precision
tag (32 or 64 bits), then the raw element data in C order.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"TNSR"
VERSION = 1
_TAGS = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


class FormatError(ValueError):
    """Malformed serialized data."""


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype == np.float32:
        tag = 32
    elif arr.dtype == np.float64:
        tag = 64
    else:
        arr, tag = arr.astype(np.float64), 64
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<I", tag))
    fh.write(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if _read_exact(fh, 4) != MAGIC:
        raise FormatError("bad magic, expected TNSR")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    (tag,) = struct.unpack("<I", _read_exact(fh, 4))
    if tag not in _TAGS:
        raise FormatError(f"unknown precision tag {tag}")
    dt = _TAGS[tag]
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="))


def to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


def save(path, arr) -> None:
    with open(Path(path), "wb") as fh:
        write_tensor(fh, arr)


def load(path) -> np.ndarray:
    with open(Path(path), "rb") as fh:
        return read_tensor(fh)
