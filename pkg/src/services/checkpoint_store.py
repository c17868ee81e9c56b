"""
Reads and writes the PGCW tensor container used for checkpoints.

Layout (little-endian): magic "PGCW", u32 version, u32 tensor count; per tensor
u16 name length, UTF-8 name, u8 dtype tag, u8 rank, rank x u64 extents, payload.
"""

from __future__ import annotations

import io
import os
import struct
import logging
import numpy as np
import torch
from pathlib import Path
from typing import Dict, Mapping

logger = logging.getLogger(__name__)

MAGIC = b"PGCW"
VERSION = 1

# dtype tags: 0 is the float32 tag every reader must accept
DTYPE_TAGS = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
}
TAG_TO_NUMPY = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}
TAG_TO_TORCH = {tag: dtype for dtype, tag in DTYPE_TAGS.items()}

class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be written or parsed."""

def encode_tensors(tensors: Mapping[str, torch.Tensor]) -> bytes:
    buffer = io.BytesIO()
    buffer.write(MAGIC)
    buffer.write(struct.pack("<II", VERSION, len(tensors)))
    for name, tensor in tensors.items():
        if tensor.dtype not in DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {tensor.dtype}")
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"{name[:40]}...: tensor name too long")
        tag = DTYPE_TAGS[tensor.dtype]
        array = tensor.detach().cpu().contiguous().numpy().astype(TAG_TO_NUMPY[tag], copy=False)
        buffer.write(struct.pack("<H", len(encoded)))
        buffer.write(encoded)
        buffer.write(struct.pack("<BB", tag, array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        buffer.write(array.tobytes(order="C"))
    return buffer.getvalue()

class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.offset}")
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

def decode_tensors(payload: bytes) -> Dict[str, torch.Tensor]:
    reader = _Reader(payload)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {magic!r}")
    version, count = reader.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported version: file has {version}, reader supports {VERSION}")
    tensors: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        tag, rank = reader.unpack("<BB", f"{name} header")
        if tag not in TAG_TO_NUMPY:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        shape = reader.unpack(f"<{rank}Q", f"{name} extents")
        dtype = np.dtype(TAG_TO_NUMPY[tag])
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(size, f"{name} payload")
        array = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(array).to(TAG_TO_TORCH[tag])
    if reader.offset != len(payload):
        raise CheckpointError(f"{len(payload) - reader.offset} trailing bytes after {count} tensors")
    return tensors

def write_checkpoint(path: Path, tensors: Mapping[str, torch.Tensor]) -> Path:
    """
    Writes atomically: the file appears only once fully written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_tensors(tensors)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(payload)
    os.replace(partial, path)
    logger.debug("Wrote %d tensors (%d bytes) to %s", len(tensors), len(payload), path)
    return path

def read_checkpoint(path: Path) -> Dict[str, torch.Tensor]:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_tensors(payload)
