"""Binary checkpoint container for named arrays.

Layout (all integers little-endian)::

    magic  b"XVCKPT\\0\\1"
    u32    format version
    u32    entry count
    entry* u32 name length, utf-8 name, u8 dtype tag, u32 ndim,
           u64 * ndim extents, raw little-endian data
"""
from __future__ import annotations

import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"XVCKPT\x00\x01"
VERSION = 1

_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("bool"): 4,
    np.dtype("<i4"): 5,
}
_DTYPES = {v: k for k, v in _TAGS.items()}


class CheckpointError(ValueError):
    pass


def _write(fh: BinaryIO, arrays: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BI", _TAGS[dt], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        _write(fh, arrays)
    os.replace(tmp, path)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            tag, ndim = struct.unpack("<BI", _read_exact(fh, 5))
            if tag not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
            shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim))
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            out[name] = np.frombuffer(_read_exact(fh, nbytes), dtype=dt).reshape(shape).copy()
    return out
