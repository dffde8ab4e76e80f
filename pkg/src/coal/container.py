"""Binary tensor container shared by checkpoints and precomputed features.

Layout (all integers little-endian u32)::

    b"COAL" | version | entry count
    per entry: name length | UTF-8 name | dtype code (0=f32, 1=f64) | rank | dims... | raw values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"COAL"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ContainerError(ValueError):
    pass


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        dtype = arr.dtype.newbyteorder("<")
        if dtype not in _CODES:
            raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", _CODES[dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ContainerError("not a tensor container (bad magic bytes)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        pos = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + length].decode("utf-8")
            pos += length
            code, rank = struct.unpack_from("<II", blob, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            if code not in _DTYPES:
                raise ContainerError(f"{name}: unknown dtype code {code}")
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise ContainerError(f"{name}: truncated payload")
            out[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise ContainerError(f"corrupt container: {exc}") from exc
    if pos != len(blob):
        raise ContainerError("trailing bytes after last entry")
    return out


def save(path: str | Path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def keys(path: str | Path) -> list[str]:
    return list(load(path))
