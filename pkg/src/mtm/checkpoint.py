"""Versioned binary checkpoints.

Layout (all little-endian):

    magic    8 bytes  b"MTMCKPT\\0"
    version  u32      currently 1
    config   8 x u32  c, n_dec, l_enc, l_dec, heads, num_classes,
                      patch_size, image_size
    count    u32      number of named tensors
    entry*   u16 name length, utf-8 name, u8 rank, u32 dims..., f64 data

Tensors are written in sorted name order, so save -> load -> save is
byte-identical.  Loading reads and validates the whole file before returning
anything, so a malformed file never yields partial state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .detector import ModelConfig
from .errors import CheckpointError

MAGIC = b"MTMCKPT\x00"
VERSION = 1

_CONFIG_FIELDS = ("c", "n_dec", "l_enc", "l_dec", "heads", "num_classes",
                  "patch_size", "image_size")


@dataclass
class CheckpointState:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        cut = len(prefix)
        return {k[cut:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<8I", *(getattr(config, f) for f in _CONFIG_FIELDS)))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> CheckpointState:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (want {VERSION})")
    config_values = r.unpack("<8I")
    config = ModelConfig(**dict(zip(_CONFIG_FIELDS, config_values)))
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n_items = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(8 * n_items), dtype="<f8").astype(np.float64)
        tensors[name] = data.reshape(shape)
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return CheckpointState(config, tensors)
