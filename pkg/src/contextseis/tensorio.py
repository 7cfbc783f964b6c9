"""Reader and writer for the ``SEIS`` binary tensor format.

Layout (all integers little-endian)::

    b"SEIS"          4 bytes magic
    version          u32, currently 1
    dtype            u8, 0 = float32, 1 = float64
    ndim             u8
    dims             ndim x u64
    payload          row-major little-endian values

Several records may be concatenated in one file; :func:`read_tensor_at`
reads the record starting at a byte offset.
"""
from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"SEIS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

PathLike = Union[str, os.PathLike]


class FormatError(ValueError):
    """Raised when bytes do not form a valid SEIS record."""


def header_size(ndim: int) -> int:
    return 4 + 4 + 1 + 1 + 8 * ndim


def encode_header(shape, dtype=np.float64) -> bytes:
    code = _CODES.get(np.dtype(dtype))
    if code is None:
        raise ValueError(f"unsupported dtype {dtype}")
    if len(shape) > 255:
        raise ValueError("too many dimensions")
    head = MAGIC + struct.pack("<IBB", VERSION, code, len(shape))
    return head + struct.pack(f"<{len(shape)}Q", *shape)


def write_record(fh: BinaryIO, array, dtype=np.float64) -> int:
    """Append one record to an open binary file; returns bytes written."""
    arr = np.ascontiguousarray(array, dtype=_DTYPES[_CODES[np.dtype(dtype)]])
    head = encode_header(arr.shape, dtype)
    fh.write(head)
    fh.write(arr.tobytes(order="C"))
    return len(head) + arr.nbytes


def write_tensor(path: PathLike, array, dtype=np.float64) -> None:
    with open(path, "wb") as fh:
        write_record(fh, array, dtype)


def _parse_header(buf: bytes, offset: int = 0):
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("bad magic, not a SEIS tensor")
    version, code, ndim = struct.unpack_from("<IBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported SEIS version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset + 10)
    return version, _DTYPES[code], tuple(int(d) for d in dims)


def read_header(path: PathLike):
    """Return ``(version, dtype, shape)`` without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10:
            raise FormatError("file too short for a SEIS header")
        ndim = head[9]
        head += fh.read(8 * ndim)
    return _parse_header(head)


def read_tensor(path: PathLike, mmap: bool = False) -> np.ndarray:
    """Load a single-record SEIS file as a native-endian float64 array.

    With ``mmap=True`` the payload is memory-mapped read-only and returned in
    its stored dtype.
    """
    _, dtype, shape = read_header(path)
    offset = header_size(len(shape))
    count = int(np.prod(shape, dtype=np.int64))
    if os.path.getsize(path) < offset + count * dtype.itemsize:
        raise FormatError("payload shorter than declared shape")
    if mmap:
        return np.memmap(path, dtype=dtype, mode="r", offset=offset, shape=shape)
    with open(path, "rb") as fh:
        fh.seek(offset)
        arr = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
    return arr.reshape(shape).astype(np.float64)


def read_tensor_at(buf: bytes, offset: int) -> tuple:
    """Parse the record at ``offset`` of ``buf``; returns ``(array, next_offset)``."""
    _, dtype, shape = _parse_header(buf, offset)
    start = offset + header_size(len(shape))
    count = int(np.prod(shape, dtype=np.int64))
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise FormatError("payload shorter than declared shape")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    return arr.reshape(shape).astype(np.float64), end


def is_seis(path: PathLike) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == MAGIC
    except OSError:
        return False


def to_bytes(array, dtype=np.float64) -> bytes:
    buf = io.BytesIO()
    write_record(buf, array, dtype)
    return buf.getvalue()


def from_bytes(data: bytes) -> np.ndarray:
    return read_tensor_at(data, 0)[0]


__all__ = [
    "FormatError",
    "MAGIC",
    "VERSION",
    "encode_header",
    "from_bytes",
    "header_size",
    "is_seis",
    "read_header",
    "read_tensor",
    "read_tensor_at",
    "to_bytes",
    "write_record",
    "write_tensor",
]

