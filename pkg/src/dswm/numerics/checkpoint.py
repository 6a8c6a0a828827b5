"""Named float64 array files with a versioned JSON header (layout in docs/formats.md)."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSWMCKPT"
VERSION = 1


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode()
        chunks.append(struct.pack("<HB", len(raw_name), arr.ndim))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path):
    """Return ``(arrays, meta)``; arrays keep their saved order."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(raw[off:off + meta_len])
    off += meta_len
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(n):
        name_len, ndim = struct.unpack_from("<HB", raw, off)
        off += 3
        name = raw[off:off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    return arrays, meta
