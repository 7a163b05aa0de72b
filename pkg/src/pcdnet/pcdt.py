"""Raw tensor file format.

Layout (little-endian)::

    b"PCDT" | u8 dtype code | u8 rank | rank x u64 dims | raw data

dtype codes: 0 = float32, 1 = float64.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import SerializationError

MAGIC = b"PCDT"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {v: k for k, v in _CODES.items()}


def to_bytes(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype not in _CODES:
        raise SerializationError(f"PCDT supports float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise SerializationError("rank too large for PCDT")
    head = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")


def from_bytes(buf: bytes) -> np.ndarray:
    stream = io.BytesIO(buf)
    arr = read(stream)
    if stream.read(1):
        raise SerializationError("trailing bytes after PCDT payload")
    return arr


def read(stream) -> np.ndarray:
    head = stream.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise SerializationError("not a PCDT stream (bad magic)")
    code, rank = struct.unpack("<BB", head[4:])
    if code not in _DTYPES:
        raise SerializationError(f"unknown PCDT dtype code {code}")
    dims_raw = stream.read(8 * rank)
    if len(dims_raw) != 8 * rank:
        raise SerializationError("truncated PCDT header")
    dims = struct.unpack(f"<{rank}Q", dims_raw)
    dtype = _DTYPES[code].newbyteorder("<")
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = stream.read(nbytes)
    if len(payload) != nbytes:
        raise SerializationError(f"truncated PCDT payload: expected {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).astype(_DTYPES[code]).reshape(dims)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arr) -> None:
    atomic_write_bytes(path, to_bytes(arr))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
