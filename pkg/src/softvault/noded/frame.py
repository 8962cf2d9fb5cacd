"""Bit-exact frame codec: ``BFP1 | type u16 | session 16 | length u32 | payload``."""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

from ..errors import FrameError, FrameTooLarge

MAGIC = b"BFP1"
HEADER = struct.Struct(">4sH16sI")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 16 * 1024 * 1024


@dataclass(frozen=True)
class Frame:
    type: int
    session_id: bytes
    payload: bytes

    def encode(self) -> bytes:
        if len(self.session_id) != 16:
            raise FrameError("session_id must be 16 bytes")
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameTooLarge(f"payload of {len(self.payload)} bytes exceeds 16 MiB")
        return HEADER.pack(MAGIC, self.type, self.session_id, len(self.payload)) + self.payload


def parse_header(data: bytes) -> tuple[int, bytes, int]:
    magic, mtype, sid, length = HEADER.unpack(data)
    if magic != MAGIC:
        raise FrameError("bad frame magic")
    if length > MAX_PAYLOAD:
        raise FrameTooLarge(f"declared length {length} exceeds 16 MiB")
    return mtype, sid, length


def decode(data: bytes) -> Frame:
    if len(data) < HEADER_SIZE:
        raise FrameError("truncated frame header")
    mtype, sid, length = parse_header(data[:HEADER_SIZE])
    if len(data) != HEADER_SIZE + length:
        raise FrameError("frame length does not match payload")
    return Frame(mtype, sid, data[HEADER_SIZE:])


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    mtype, sid, length = parse_header(_recv_exact(sock, HEADER_SIZE))
    return Frame(mtype, sid, _recv_exact(sock, length))


def write_frame(sock: socket.socket, frame: Frame) -> bytes:
    data = frame.encode()
    sock.sendall(data)
    return data
