"""Length-prefixed binary protocol spoken between shard clients and servers.

Frames (integers little-endian):

    request  = u32 frame_len | u8 opcode | u16 key_len | key
               | PUT only: u32 value_len | value
    response = u32 frame_len | u8 status | u32 body_len | body

``frame_len`` counts the bytes after itself. Opcodes: 1 GET, 2 PUT,
3 EXISTS, 4 STATS. Statuses: 0 ok, 1 not-found, 2 error. Frames over
64 MiB are refused.
"""

from __future__ import annotations

import socket
import struct

from .errors import StoreError

MAX_FRAME = 64 * 1024 * 1024

OP_GET = 1
OP_PUT = 2
OP_EXISTS = 3
OP_STATS = 4

ST_OK = 0
ST_NOT_FOUND = 1
ST_ERROR = 2


class WireError(StoreError):
    """Malformed frame on the wire."""


def pack_request(opcode: int, key: bytes, value: bytes | None = None) -> bytes:
    if len(key) > 0xFFFF:
        raise WireError("key longer than u16")
    body = struct.pack("<BH", opcode, len(key)) + key
    if opcode == OP_PUT:
        if value is None:
            raise WireError("PUT requires a value")
        body += struct.pack("<I", len(value)) + value
    elif value is not None:
        raise WireError("only PUT carries a value")
    if len(body) > MAX_FRAME:
        raise WireError(f"frame of {len(body)} bytes exceeds the 64 MiB limit")
    return struct.pack("<I", len(body)) + body


def unpack_request(body: bytes) -> tuple[int, bytes, bytes | None]:
    if len(body) < 3:
        raise WireError("request frame shorter than opcode+key_len")
    opcode, key_len = struct.unpack_from("<BH", body)
    off = 3
    if len(body) < off + key_len:
        raise WireError("request frame truncates its key")
    key = body[off:off + key_len]
    off += key_len
    if opcode == OP_PUT:
        if len(body) < off + 4:
            raise WireError("PUT frame missing value length")
        (value_len,) = struct.unpack_from("<I", body, off)
        off += 4
        if len(body) != off + value_len:
            raise WireError("PUT frame length mismatch")
        return opcode, key, body[off:]
    if opcode in (OP_GET, OP_EXISTS, OP_STATS):
        if len(body) != off:
            raise WireError("unexpected trailing bytes in request")
        return opcode, key, None
    raise WireError(f"unknown opcode {opcode}")


def pack_response(status: int, body: bytes = b"") -> bytes:
    frame = struct.pack("<BI", status, len(body)) + body
    return struct.pack("<I", len(frame)) + frame


def unpack_response(frame: bytes) -> tuple[int, bytes]:
    if len(frame) < 5:
        raise WireError("response frame shorter than status+body_len")
    status, body_len = struct.unpack_from("<BI", frame)
    if len(frame) != 5 + body_len:
        raise WireError("response frame length mismatch")
    return status, frame[5:]


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes or raise; b'' return means clean EOF at a boundary."""
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            if remaining == n:
                return b""
            raise StoreError("connection closed mid-frame")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> bytes | None:
    """Read one length-prefixed frame; None on clean EOF."""
    header = recv_exact(sock, 4)
    if header == b"":
        return None
    (length,) = struct.unpack("<I", header)
    if length > MAX_FRAME:
        raise WireError(f"declared frame of {length} bytes exceeds the 64 MiB limit")
    return recv_exact(sock, length)
