"""AISP frame codec.

Little-endian layout::

    magic "AISP" (4) | version u16 | message_type u8 | request_id u64
    | payload_length u32 | payload | CRC32 u32

The CRC covers everything between the magic and the CRC itself.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from enum import IntEnum

from ..errors import CorruptionError

MAGIC = b"AISP"
PROTOCOL_VERSION = 1
MAX_PAYLOAD = 16 * 1024 * 1024
_HEADER = struct.Struct("<4sHBQI")
HEADER_SIZE = _HEADER.size
TRAILER_SIZE = 4
OVERHEAD = HEADER_SIZE + TRAILER_SIZE


class MessageType(IntEnum):
    IMAGE_SUBMIT = 1
    REPORT = 2
    DATA_UPLOAD = 3
    MODEL_UPDATE = 4
    MODEL_PULL = 5
    MEDICAL_NOTIFY = 6
    ACK = 7
    ERROR = 8


class FrameError(CorruptionError):
    def __init__(self, message: str, request_id=None):
        super().__init__(message)
        self.request_id = request_id


class BadMagicError(FrameError):
    pass


class ChecksumError(FrameError):
    pass


class OversizeError(FrameError):
    pass


class UnsupportedVersionError(FrameError):
    pass


class FrameLengthError(FrameError):
    """Byte count does not match the declared payload length."""


@dataclass(frozen=True)
class Frame:
    message_type: int
    request_id: int
    payload: bytes = b""
    version: int = PROTOCOL_VERSION

    def __post_init__(self):
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, "payload", bytes(self.payload))

    @property
    def known_type(self) -> bool:
        return self.message_type in MessageType._value2member_map_

    @property
    def encoded_size(self) -> int:
        return OVERHEAD + len(self.payload)


def encode(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise OversizeError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    head = _HEADER.pack(MAGIC, frame.version, frame.message_type, frame.request_id,
                        len(frame.payload))
    crc = zlib.crc32(frame.payload, zlib.crc32(head[4:]))
    return head + frame.payload + struct.pack("<I", crc)


def _check_header(header: bytes) -> tuple:
    magic, version, mtype, request_id, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersionError(f"protocol version {version} not supported")
    if length > MAX_PAYLOAD:
        raise OversizeError(f"declared payload of {length} bytes exceeds {MAX_PAYLOAD}")
    return version, mtype, request_id, length


def _finish(header: bytes, body: bytes) -> Frame:
    version, mtype, request_id, length = _check_header(header)
    payload, trailer = body[:length], body[length:length + TRAILER_SIZE]
    (crc,) = struct.unpack("<I", trailer)
    if zlib.crc32(payload, zlib.crc32(header[4:])) != crc:
        raise ChecksumError("frame CRC mismatch", request_id)
    return Frame(mtype, request_id, payload, version)


def decode(data: bytes) -> Frame:
    """Decode exactly one frame; any missing or surplus byte is an error."""
    data = bytes(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < OVERHEAD:
        raise FrameLengthError(f"{len(data)} bytes is shorter than a frame")
    _, _, _, length = _check_header(data[:HEADER_SIZE])
    expected = OVERHEAD + length
    if len(data) != expected:
        raise FrameLengthError(f"got {len(data)} bytes, frame declares {expected}")
    return _finish(data[:HEADER_SIZE], data[HEADER_SIZE:])


class FrameDecoder:
    """Incremental decoder: feed arbitrary chunks, collect complete frames.

    Header fields are validated as soon as the header is complete, so a forged
    length is rejected before any payload is buffered.
    """

    def __init__(self):
        self._buf = bytearray()
        self._header = None
        self._need = 0

    @property
    def buffered(self) -> int:
        return len(self._buf)

    @property
    def mid_frame(self) -> bool:
        return bool(self._buf) or self._header is not None

    def feed(self, chunk: bytes) -> list:
        self._buf += chunk
        frames = []
        while True:
            if self._header is None:
                if len(self._buf) >= 4 and self._buf[:4] != MAGIC:
                    raise BadMagicError(f"bad magic {bytes(self._buf[:4])!r}")
                if len(self._buf) < HEADER_SIZE:
                    break
                header = bytes(self._buf[:HEADER_SIZE])
                _, _, _, length = _check_header(header)
                del self._buf[:HEADER_SIZE]
                self._header = header
                self._need = length + TRAILER_SIZE
            if len(self._buf) < self._need:
                break
            body = bytes(self._buf[:self._need])
            del self._buf[:self._need]
            header, self._header = self._header, None
            frames.append(_finish(header, body))
        return frames

    def bytes_wanted(self) -> int:
        """How many more bytes complete the current header or frame."""
        if self._header is None:
            return max(1, HEADER_SIZE - len(self._buf))
        return max(1, self._need - len(self._buf))
