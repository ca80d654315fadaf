"""Tunnel frames: 1-byte type, 2-byte big-endian length, payload."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

MAX_PAYLOAD = 0xFFFF
HEADER = struct.Struct(">BH")
HEADER_SIZE = HEADER.size


class FrameType(enum.IntEnum):
    DATA = 0
    DUMMY = 1
    CONTROL = 2


class ControlKind(enum.IntEnum):
    CONNECT = 1
    REPLY = 2
    CLOSE = 3


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    type: FrameType
    payload: bytes = b""

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise FrameError(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.payload)


def encode_frame(frame: Frame) -> bytes:
    return HEADER.pack(int(frame.type), len(frame.payload)) + frame.payload


def parse_header(header: bytes) -> tuple[FrameType, int]:
    ftype, length = HEADER.unpack(header)
    try:
        return FrameType(ftype), length
    except ValueError:
        raise FrameError(f"unknown frame type {ftype}") from None


class FrameDecoder:
    """Incremental decoder: feed bytes, collect complete frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        out = []
        while len(self._buf) >= HEADER_SIZE:
            ftype, length = parse_header(bytes(self._buf[:HEADER_SIZE]))
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                break
            out.append(Frame(ftype, bytes(self._buf[HEADER_SIZE:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def split_payload(data: bytes, ftype: FrameType = FrameType.DATA, limit: int = MAX_PAYLOAD) -> list[Frame]:
    """Cut ``data`` into frames of at most ``limit`` payload bytes, in order."""
    if not data:
        return []
    return [Frame(ftype, data[i:i + limit]) for i in range(0, len(data), limit)]


def dummy_frames(n_bytes: int, fill: bytes | None = None) -> list[Frame]:
    """Dummy frames carrying ``n_bytes`` of discardable payload in total."""
    if n_bytes <= 0:
        return []
    body = fill if fill is not None else bytes(n_bytes)
    return split_payload(body[:n_bytes], FrameType.DUMMY)


# control payloads: kind byte, then kind-specific fields

def encode_connect(host: str, port: int) -> bytes:
    from .socks import encode_address
    return bytes([ControlKind.CONNECT]) + encode_address(host, port)


def encode_reply(status: int) -> bytes:
    return bytes([ControlKind.REPLY, status])


def encode_close() -> bytes:
    return bytes([ControlKind.CLOSE])


def control_kind(payload: bytes) -> ControlKind:
    if not payload:
        raise FrameError("empty control frame")
    try:
        return ControlKind(payload[0])
    except ValueError:
        raise FrameError(f"unknown control kind {payload[0]}") from None
