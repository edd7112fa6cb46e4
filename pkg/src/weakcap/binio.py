"""Little-endian binary helpers for the checkpoint and feature formats."""

import struct

import numpy as np

from .errors import IngestError


class Writer:
    def __init__(self, f):
        self.f = f

    def raw(self, data: bytes):
        self.f.write(data)

    def u8(self, v: int):
        self.f.write(struct.pack("<B", v))

    def u32(self, v: int):
        self.f.write(struct.pack("<I", v))

    def f64(self, v: float):
        self.f.write(struct.pack("<d", v))

    def text(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.f.write(b)

    def names(self, names):
        self.u32(len(names))
        for n in names:
            self.text(n)

    def array(self, a, dtype="<f8"):
        self.f.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


class Reader:
    def __init__(self, data: bytes, source: str = "<bytes>"):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IngestError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def magic(self, expected: bytes):
        got = self.take(len(expected))
        if got != expected:
            raise IngestError(f"{self.source}: bad magic {got!r}, expected {expected!r}")

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def names(self) -> list[str]:
        return [self.text() for _ in range(self.u32())]

    def array(self, shape, dtype="<f8") -> np.ndarray:
        dt = np.dtype(dtype)
        count = int(np.prod(shape)) if len(shape) else 1
        buf = self.take(count * dt.itemsize)
        return np.frombuffer(buf, dtype=dt).astype(np.float64).reshape(shape)

    def done(self):
        if self.pos != len(self.data):
            raise IngestError(f"{self.source}: {len(self.data) - self.pos} trailing bytes")
