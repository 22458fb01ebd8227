"""Versioned binary container for trained network parameters.

Layout (all integers little endian):

    magic        8 bytes  b"OARSEGMD"
    body         version u32, meta JSON (u32 length + utf-8),
                 tensor count u32, then per tensor:
                 name (u16 length + utf-8), ndim u8, dims (u32 each),
                 float32 payload
    checksum     u64 FNV-1a over the body

The meta JSON carries the structure name and a config snapshot.  Loading
re-validates the checksum and every declared length, so truncated or
bit-flipped files are rejected rather than misread.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptModelError

MAGIC = b"OARSEGMD"
VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def save_model(params: dict, meta: dict, path) -> None:
    """Serialize named float32 tensors plus a JSON meta block."""
    body = bytearray()
    body += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body += struct.pack("<I", len(meta_bytes))
    body += meta_bytes
    body += struct.pack("<I", len(params))
    for name, arr in params.items():
        name_b = name.encode("utf-8")
        body += struct.pack("<H", len(name_b))
        body += name_b
        arr = np.ascontiguousarray(arr, dtype="<f4")
        body += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<I", d)
        body += arr.tobytes()
    blob = MAGIC + bytes(body) + struct.pack("<Q", fnv1a64(bytes(body)))
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptModelError(f"{self.path}: truncated model file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_model(path) -> tuple[dict, dict]:
    """Inverse of :func:`save_model`; returns (params, meta)."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptModelError(f"{path}: not a model file (bad magic)")
    body, stored = blob[len(MAGIC):-8], struct.unpack("<Q", blob[-8:])[0]
    if fnv1a64(body) != stored:
        raise CorruptModelError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    version = r.u32()
    if version != VERSION:
        raise CorruptModelError(f"{path}: unsupported format version {version}")
    meta_len = r.u32()
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptModelError(f"{path}: bad meta block: {e}") from None
    n_tensors = r.u32()
    params = {}
    for _ in range(n_tensors):
        name = r.take(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        count = 1
        for d in shape:  # python ints: no overflow before the bounds check
            count *= d
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        params[name] = data.astype(np.float32)
    if r.pos != len(body):
        raise CorruptModelError(f"{path}: {len(body) - r.pos} trailing bytes after tensors")
    return params, meta
