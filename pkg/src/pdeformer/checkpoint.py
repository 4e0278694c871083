"""Binary parameter checkpoints.

Layout, all integers little endian::

    b"PDEF"                  magic
    u32 version              currently 1
    u32 count                number of tensors
    per tensor:
        u32 name_len, name   UTF-8 bytes
        u32 rank
        u64 extent * rank
        u32 dtype            1 = float32 LE
        data                 prod(extents) * 4 bytes, C order

Values are computed in float64 and stored as float32.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PDEF"
VERSION = 1
DTYPE_F32 = 1
MAX_RANK = 16


class CheckpointError(ValueError):
    def __init__(self, offset: int, detail: str):
        self.offset = offset
        super().__init__(f"checkpoint byte {offset}: {detail}")


def checkpoint_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        with np.errstate(over="ignore"):
            arr = np.asarray(value, dtype="<f4", order="C")
        if not np.isfinite(arr).all():
            raise ValueError(f"{name}: values are not finite in float32")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(struct.pack("<I", DTYPE_F32))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n > len(self.blob) - self.pos:
            raise CheckpointError(self.pos, f"{what} needs {n} bytes, {len(self.blob) - self.pos} left")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def parse_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    """Decode checkpoint bytes, checking every length before using it."""
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(0, "bad magic, expected b'PDEF'")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(4, f"unsupported version {version}")
    count_at = r.pos
    count = r.u32("tensor count")
    # smallest possible tensor record is 16 bytes (empty name, rank 0, tag, one value)
    if count * 16 > len(blob) - r.pos:
        raise CheckpointError(count_at, f"tensor count {count} exceeds file size")
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        at = r.pos
        name_len = r.u32(f"tensor {i} name length")
        try:
            name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(at + 4, f"tensor {i} name is not UTF-8") from None
        if name in out:
            raise CheckpointError(at, f"duplicate tensor name {name!r}")
        rank_at = r.pos
        rank = r.u32(f"{name} rank")
        if rank > MAX_RANK:
            raise CheckpointError(rank_at, f"{name}: rank {rank} exceeds {MAX_RANK}")
        shape = tuple(r.u64(f"{name} extent") for _ in range(rank))
        tag_at = r.pos
        tag = r.u32(f"{name} dtype")
        if tag != DTYPE_F32:
            raise CheckpointError(tag_at, f"{name}: unknown dtype tag {tag}")
        size = 1
        for e in shape:
            size *= e
        if size * 4 > len(blob) - r.pos:
            raise CheckpointError(r.pos, f"{name}: shape {shape} needs {size * 4} bytes, "
                                         f"{len(blob) - r.pos} left")
        data = r.take(size * 4, f"{name} data")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float64)
    if r.pos != len(blob):
        raise CheckpointError(r.pos, f"{len(blob) - r.pos} trailing bytes")
    return out


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return parse_checkpoint(Path(path).read_bytes())


def quantization_bound(params: Mapping[str, np.ndarray]) -> float:
    """Largest round-to-nearest float32 error possible for these values."""
    worst = 0.0
    for v in params.values():
        a = np.abs(np.asarray(v, dtype=np.float64))
        if a.size:
            worst = max(worst, float((np.spacing(a.astype(np.float32)).astype(np.float64) / 2).max()))
    return worst
