"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"FRC1"
    version 1 byte   currently 1
    count   uint32   number of records
    record:
        name_len uint16, name UTF-8
        dtype    uint8   0 = float32, 1 = float64
        ndim     uint8
        shape    uint32 per dim
        payload  raw little-endian row-major values

Round-trips are byte-exact: save(load(path)) reproduces the file.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FRC1"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    """Malformed checkpoint file or unsupported record."""


def save(path, records: Mapping[str, np.ndarray]) -> None:
    """Write named arrays in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [MAGIC, struct.pack("<BI", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)  # keeps ndim >= 1 inputs intact
        if arr.dtype not in _TAG_FOR:
            raise CheckpointError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"record name too long: {name!r}")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", _TAG_FOR[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


def load(path) -> dict[str, np.ndarray]:
    """Read records back, preserving order and exact values."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + name_len].decode("utf-8")
            off += name_len
            tag, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            if tag not in _DTYPE_TAGS:
                raise CheckpointError(f"{path}: record {name!r} has unknown dtype tag {tag}")
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            dtype = _DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize,
                                offset=off).reshape(shape)
            out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
            off += nbytes
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated file ({e})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out
