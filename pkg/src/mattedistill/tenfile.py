"""Binary serialization for tensors and named-tensor checkpoints.

Single-tensor ".ten" layout (all integers little-endian):

    bytes 0..3   magic b"PPTN"
    u32          format version (1)
    u32          rank
    rank * u64   dimensions
    f64 * prod   payload, C order

Checkpoint layout:

    bytes 0..3   magic b"PPID"
    u32          format version (1)
    u32          tensor count
    per tensor:  u16 name length, UTF-8 name, then rank/dims/payload
                 exactly as in ".ten" (no inner magic or version)

Loads reject bad magic, unknown versions, and truncated or oversized
payloads so a corrupted checkpoint fails loudly instead of training on
garbage.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TEN_MAGIC = b"PPTN"
CKPT_MAGIC = b"PPID"
VERSION = 1

__all__ = ["save_tensor", "load_tensor", "save_checkpoint", "load_checkpoint"]


def _pack_body(arr: np.ndarray) -> bytes:
    # np.ascontiguousarray would silently promote 0-d arrays to shape (1,)
    arr = np.asarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f8").tobytes()


class _Reader:
    def __init__(self, buf: bytes, name: str):
        self.buf = buf
        self.pos = 0
        self.name = name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"{self.name}: truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def body(self) -> np.ndarray:
        rank = self.u32()
        if rank > 8:
            raise ValueError(f"{self.name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", self.take(8 * rank)) if rank else ()
        count = 1
        for d in dims:
            count *= d
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)

    def done(self):
        if self.pos != len(self.buf):
            raise ValueError(f"{self.name}: {len(self.buf) - self.pos} trailing bytes")


def save_tensor(path, arr) -> None:
    data = TEN_MAGIC + struct.pack("<I", VERSION) + _pack_body(np.asarray(arr))
    Path(path).write_bytes(data)


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    r = _Reader(path.read_bytes(), path.name)
    if r.take(4) != TEN_MAGIC:
        raise ValueError(f"{path.name}: not a tensor file (bad magic)")
    ver = r.u32()
    if ver != VERSION:
        raise ValueError(f"{path.name}: unsupported tensor format version {ver}")
    arr = r.body()
    r.done()
    return arr


def save_checkpoint(path, named: dict[str, np.ndarray]) -> None:
    """Write an ordered name -> array mapping; insertion order is preserved."""
    parts = [CKPT_MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(named))]
    for name, arr in named.items():
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(_pack_body(np.asarray(arr)))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path.name)
    if r.take(4) != CKPT_MAGIC:
        raise ValueError(f"{path.name}: not a checkpoint file (bad magic)")
    ver = r.u32()
    if ver != VERSION:
        raise ValueError(f"{path.name}: unsupported checkpoint version {ver}")
    n = r.u32()
    named: dict[str, np.ndarray] = {}
    for _ in range(n):
        name = r.take(r.u16()).decode("utf-8")
        if name in named:
            raise ValueError(f"{path.name}: duplicate tensor name {name!r}")
        named[name] = r.body()
    r.done()
    return named
