"""Little-endian binary blocks shared by the artifact file formats.

All multi-byte integers are u32 little-endian; floating point is IEEE f64
little-endian. Tensor blocks are rank, then one u32 per dimension, then the
row-major values. Readers fail with the byte offset of the first problem so
truncated or corrupt files are diagnosable.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor


class FileFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FileFormatError(f"truncated file while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def f64_array(self, count: int, what: str) -> np.ndarray:
        raw = self.take(8 * count, what)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def expect_magic(self, magic: bytes):
        at = self.offset
        got = self.take(len(magic), "magic")
        if got != magic:
            raise FileFormatError(f"bad magic {got!r}, expected {magic!r}", at)

    def done(self):
        if self.offset != len(self.data):
            raise FileFormatError(
                f"{len(self.data) - self.offset} unexpected trailing bytes", self.offset
            )


def pack_u8(v: int) -> bytes:
    return struct.pack("<B", v)


def pack_u16(v: int) -> bytes:
    return struct.pack("<H", v)


def pack_u32(v: int) -> bytes:
    return struct.pack("<I", v)


def pack_f64(v: float) -> bytes:
    return struct.pack("<d", v)


def pack_tensor(t: Tensor) -> bytes:
    parts = [pack_u32(len(t.shape))]
    parts.extend(pack_u32(d) for d in t.shape)
    parts.append(t.values.astype("<f8").tobytes())
    return b"".join(parts)


def read_tensor(r: Reader) -> Tensor:
    rank = r.u32("tensor rank")
    if rank > 8:
        raise FileFormatError(f"implausible tensor rank {rank}", r.offset - 4)
    dims = [r.u32("tensor dimension") for _ in range(rank)]
    n = 1
    for d in dims:
        if d == 0:
            raise FileFormatError("zero tensor dimension", r.offset)
        n *= d
    values = r.f64_array(n, "tensor values")
    return Tensor(values, tuple(dims))
