"""Canonical length-prefixed binary encoding used for every signed or hashed structure.

All integers are big-endian.  Variable-length byte strings carry a 32-bit
length prefix; strings are UTF-8 encoded byte strings.  A ``Reader`` refuses
to finish while unread bytes remain, so two different encodings never parse
to the same value.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterable

from .errors import MalformedData


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">B", value))
        return self

    def u16(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">H", value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">I", value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(struct.pack(">Q", value))
        return self

    def fixed(self, data: bytes, size: int) -> "Writer":
        if len(data) != size:
            raise ValueError(f"expected {size} bytes, got {len(data)}")
        self._parts.append(bytes(data))
        return self

    def blob(self, data: bytes) -> "Writer":
        self._parts.append(struct.pack(">I", len(data)))
        self._parts.append(bytes(data))
        return self

    def text(self, value: str) -> "Writer":
        return self.blob(value.encode("utf-8"))

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(bytes(data))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise MalformedData(f"truncated input at offset {self._pos}")
        out = self._data[self._pos:self._pos + n].tobytes()
        self._pos += n
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def fixed(self, size: int) -> bytes:
        return self._take(size)

    def blob(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedData("invalid UTF-8 string") from exc

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def end(self) -> None:
        if self.remaining:
            raise MalformedData(f"{self.remaining} trailing bytes")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_fields(label: str, fields: Iterable[bytes]) -> bytes:
    """Domain-separated hash of a sequence of byte strings."""
    w = Writer().text(label)
    for f in fields:
        w.blob(f)
    return sha256(w.getvalue())


def encode_params(params: dict) -> bytes:
    """Canonical encoding of a flat parameter mapping (sorted keys).

    Values may be bytes, str, int or bool.  Used for audit-log parameter hashes.
    """
    w = Writer().u32(len(params))
    for key in sorted(params):
        value = params[key]
        w.text(key)
        if isinstance(value, bool):
            w.u8(3).u8(int(value))
        elif isinstance(value, int):
            w.u8(2).text(str(value))
        elif isinstance(value, str):
            w.u8(1).text(value)
        elif isinstance(value, (bytes, bytearray)):
            w.u8(0).blob(bytes(value))
        else:
            raise TypeError(f"unsupported parameter type for {key!r}: {type(value).__name__}")
    return w.getvalue()
