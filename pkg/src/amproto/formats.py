"""Little-endian binary containers and the FNV-1a checksum they share."""
from __future__ import annotations

import struct

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


class Reader:
    """Cursor over a byte buffer that raises ``err`` on truncation."""

    def __init__(self, data: bytes, err: type[Exception]):
        self.data = data
        self.pos = 0
        self.err = err

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise self.err(f"truncated: wanted {n} bytes at offset {self.pos}, "
                           f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    def remaining(self) -> int:
        return len(self.data) - self.pos
