"""Shared plumbing for the binary container formats.

All containers follow the same skeleton: 4-byte ASCII magic, u32
little-endian version, then format-specific blocks. Every decode error
raises :class:`FormatError` carrying the byte offset it was detected at.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class FormatError(ValueError):
    """Malformed container file (bad magic/version, truncation, size mismatch)."""


def u32(value: int) -> bytes:
    return struct.pack("<I", value)


def json_block(obj) -> bytes:
    """Length-prefixed canonical JSON (sorted keys, compact separators)."""
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return u32(len(raw)) + raw


def f32_block(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def u64_block(values) -> bytes:
    return struct.pack(f"<{len(values)}Q", *values)


class Reader:
    """Sequential reader over container bytes with offset-tagged failures."""

    def __init__(self, data: bytes, name: str = "file"):
        self.data = data
        self.off = 0
        self.name = name

    def fail(self, msg: str):
        raise FormatError(f"{self.name}: {msg} at byte offset {self.off}")

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            self.fail(f"truncated while reading {what} ({n} bytes needed)")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def magic(self, expected: bytes):
        got = self.take(4, "magic")
        if got != expected:
            self.off -= 4
            self.fail(f"bad magic {got!r}, expected {expected!r}")

    def version(self, expected: int):
        got = self.u32("version")
        if got != expected:
            self.off -= 4
            self.fail(f"unsupported version {got}, expected {expected}")

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64s(self, n: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{n}Q", self.take(8 * n, what))

    def f32(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)

    def json(self, what: str):
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            self.off -= n
            self.fail(f"invalid {what} JSON")

    def expect_end(self):
        if self.off != len(self.data):
            self.fail(f"{len(self.data) - self.off} trailing bytes")
