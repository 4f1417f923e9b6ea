"""Binary checkpoint format for named float64 tensors.

Layout (little-endian): magic ``RAGP``, u32 format version, then until EOF a
sequence of records ``u32 name length, name bytes (UTF-8), u8 rank,
u32 dims[rank], float64 data`` in row-major order.  Tensors are written in
sorted name order so identical parameters give identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RAGP"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out = {}
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(dims)
        pos += 8 * count
        out[name] = arr.astype(np.float64)
    return out


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> str:
    data = dumps(tensors)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def digest(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(tensors)).hexdigest()
