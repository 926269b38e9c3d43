"""Portable flat binary checkpoints.

Layout, all integers little-endian:

    magic   8 bytes  b"FLTCKPT1"
    u32     metadata length, then that many bytes of JSON (sorted keys)
    u32     array count
    per array, sorted by name:
        u16  name length, then UTF-8 name
        u8   ndim, then ndim x u32 dims
        float32 data, C order

Values are stored as 32-bit reals; the writer is deterministic, so equal
parameters and metadata produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FLTCKPT1"


class CheckpointFormatError(ValueError):
    pass


def save_checkpoint(
    path: str | Path, params: dict[str, np.ndarray], metadata: dict
) -> None:
    chunks = [MAGIC]
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    chunks.append(struct.pack("<I", len(meta_bytes)))
    chunks.append(meta_bytes)
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        values = np.ascontiguousarray(params[name], dtype="<f4")
        name_bytes = name.encode()
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    offset = len(MAGIC)

    def take(fmt: str) -> tuple:
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, data, offset)
        offset += size
        return values

    (meta_len,) = take("<I")
    metadata = json.loads(data[offset : offset + meta_len].decode())
    offset += meta_len

    (count,) = take("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[offset : offset + name_len].decode()
        offset += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        n_values = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(data, dtype="<f4", count=n_values, offset=offset)
        offset += n_values * 4
        params[name] = values.reshape(shape).astype(np.float64)
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return params, metadata


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
