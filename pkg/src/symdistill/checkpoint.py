"""SYMC checkpoint container.

Layout (little-endian)::

    "SYMC" | u32 version | u32 n_entries
    | n_entries x (u16 name_len | name | u8 rank | u32 dims[rank] | f32 payload)
    | u32 config_len | UTF-8 config snapshot

Every tensor is stored as f32. Integers that may exceed 2**24 (the RNG seed)
are split into 16-bit halves so they survive the f32 payload exactly.
"""

from __future__ import annotations

import os
import struct

import numpy as np
import torch

MAGIC = b"SYMC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_u32(x: int) -> torch.Tensor:
    return torch.tensor([x >> 16, x & 0xFFFF], dtype=torch.float32)


def decode_u32(t: torch.Tensor) -> int:
    hi, lo = (int(v) for v in t.tolist())
    return (hi << 16) | lo


def save_checkpoint(path, tensors: dict, config_text: str = "") -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw_name = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    cfg = config_text.encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)) + cfg)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict, str]:
    """Return ``({name: float32 tensor}, config_text)``."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    version, n_entries = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    tensors = {}
    for _ in range(n_entries):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = torch.from_numpy(arr)
    (cfg_len,) = r.unpack("<I")
    config_text = r.take(cfg_len).decode("utf-8")
    return tensors, config_text
