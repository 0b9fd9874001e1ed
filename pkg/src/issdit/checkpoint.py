"""Flat binary weight files.

Layout, all little-endian: magic "ISSW", version u32, tensor count u32,
then per tensor: name length u32, utf-8 name, rank u32, dims u32 each,
float32 payload. Tensors are written in sorted-name order so identical
parameters always produce identical bytes.

Auxiliary metadata (model/horizon config, normalizer stats) rides along
as one reserved tensor holding utf-8 JSON bytes widened to float32.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ISSW"
VERSION = 1
META_NAME = "meta/json_utf8"


def _write_tensor(f, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    arr = np.asarray(arr)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write named float arrays plus an optional JSON metadata blob."""
    items = sorted(arrays.items())
    if any(name == META_NAME for name, _ in items):
        raise ValueError(f"{META_NAME} is reserved")
    count = len(items) + (1 if meta is not None else 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, count))
        for name, arr in items:
            _write_tensor(f, name, arr)
        if meta is not None:
            blob = json.dumps(meta, sort_keys=True).encode("utf-8")
            _write_tensor(f, META_NAME, np.frombuffer(blob, dtype=np.uint8)
                          .astype(np.float32))


def load_checkpoint(path):
    """Returns (arrays, meta). meta is None when the file carries none."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        arrays = {}
        meta = None
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
            if name == META_NAME:
                meta = json.loads(data.astype(np.uint8).tobytes().decode("utf-8"))
            else:
                arrays[name] = data.copy()
    return arrays, meta
