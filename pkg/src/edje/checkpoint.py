"""Flat versioned binary container of named float64 tensors.

Layout: magic "EDJT", u32 version, u32 tensor count, then per tensor
(sorted by name for byte-determinism): u32 name length, name bytes
(utf-8), u32 rank, u32 dims, raw little-endian float64 payload. Used for
model checkpoints and for embedding files keyed by image/text id.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .errors import FormatError

MAGIC = b"EDJT"
VERSION = 1


def save_tensors(path: Path | str, tensors: dict[str, np.ndarray | Tensor]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        value = tensors[name]
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else value, dtype=np.float64
        )
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: Path | str) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a tensor container (bad magic at offset 0)")
    try:
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported container version {version}")
        at = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, at)
            at += 4
            name = blob[at : at + name_len].decode("utf-8")
            at += name_len
            (rank,) = struct.unpack_from("<I", blob, at)
            at += 4
            dims = struct.unpack_from(f"<{rank}I", blob, at)
            at += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(blob, dtype="<f8", count=size, offset=at)
            at += 8 * size
            out[name] = payload.reshape(dims).astype(np.float64)
        return out
    except struct.error as exc:
        raise FormatError(f"{path}: truncated tensor container") from exc
