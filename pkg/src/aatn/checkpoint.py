"""Binary checkpoint format for named float32 tensors.

Layout: magic b"AATN", format version (u32), then one record per tensor:
name length (u32), UTF-8 name, rank (u32), one u32 per dimension, and the
row-major little-endian float32 payload. All integers little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"AATN"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, "Tensor | np.ndarray"]) -> str:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, t in tensors.items():
            arr = np.ascontiguousarray(
                t.data if isinstance(t, Tensor) else t, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))
    return str(path)


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exact(f, 4 * count)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            out[name] = arr.astype(np.float32)
    return out
