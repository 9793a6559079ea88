"""Little-endian binary container primitives shared by the on-disk formats.

All engine files (feature bank, concept lexicon, concept cache, checkpoint)
use the same header style: 4-byte magic, u32 version, then format-specific
fields.  Vectors are stored as IEEE-754 single precision.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import BankMagicError, BankTruncatedError, BankVersionError


class Writer:
    def __init__(self, fh: BinaryIO):
        self.fh = fh

    def magic(self, tag: bytes) -> None:
        assert len(tag) == 4
        self.fh.write(tag)

    def u8(self, v: int) -> None:
        self.fh.write(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self.fh.write(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self.fh.write(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.fh.write(struct.pack("<Q", v))

    def f64(self, v: float) -> None:
        self.fh.write(struct.pack("<d", v))

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("string too long for u16 length prefix")
        self.u16(len(raw))
        self.fh.write(raw)

    def f32_array(self, arr: np.ndarray) -> None:
        self.fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def f64_array(self, arr: np.ndarray) -> None:
        self.fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class Reader:
    def __init__(self, fh: BinaryIO, name: str = "file"):
        self.fh = fh
        self.name = name

    def _take(self, n: int) -> bytes:
        raw = self.fh.read(n)
        if len(raw) != n:
            raise BankTruncatedError(f"{self.name}: truncated (wanted {n} bytes, got {len(raw)})")
        return raw

    def magic(self, expected: bytes) -> None:
        raw = self._take(4)
        if raw != expected:
            raise BankMagicError(f"{self.name}: bad magic {raw!r}, expected {expected!r}")

    def version(self, expected: int) -> int:
        v = self.u32()
        if v != expected:
            raise BankVersionError(f"{self.name}: unsupported version {v}, expected {expected}")
        return v

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def string(self) -> str:
        n = self.u16()
        return self._take(n).decode("utf-8")

    def f32_array(self, count: int) -> np.ndarray:
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def f32_array_raw(self, count: int) -> np.ndarray:
        """Single-precision values without the float64 widening."""
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").copy()

    def f64_array(self, count: int) -> np.ndarray:
        raw = self._take(8 * count)
        return np.frombuffer(raw, dtype="<f8").copy()

    def expect_eof(self) -> None:
        if self.fh.read(1):
            raise BankTruncatedError(f"{self.name}: trailing bytes after payload")
