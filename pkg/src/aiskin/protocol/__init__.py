"""Framed binary wire protocol linking terminal, edge and cloud."""

from .frames import (
    MAX_PAYLOAD,
    OVERHEAD,
    PROTOCOL_VERSION,
    BadMagicError,
    ChecksumError,
    Frame,
    FrameDecoder,
    FrameError,
    FrameLengthError,
    MessageType,
    OversizeError,
    UnsupportedVersionError,
    decode,
    encode,
)
from .messages import (
    Ack,
    DataUpload,
    ErrorMessage,
    ImageSubmit,
    MalformedPayload,
    MedicalNotify,
    ModelPull,
    ModelUpdate,
    Report,
    Status,
    ack,
    error,
    parse,
    to_frame,
)
from .transport import (
    Connection,
    FrameServer,
    TransmissionRecord,
    format_address,
    ideal_delay,
    parse_address,
    request,
    throttled_send,
)

__all__ = [
    "MAX_PAYLOAD", "OVERHEAD", "PROTOCOL_VERSION", "Ack", "BadMagicError", "ChecksumError",
    "Connection", "DataUpload", "ErrorMessage", "Frame", "FrameDecoder", "FrameError",
    "FrameLengthError", "FrameServer", "ImageSubmit", "MalformedPayload", "MedicalNotify",
    "MessageType", "ModelPull", "ModelUpdate", "OversizeError", "Report", "Status",
    "TransmissionRecord", "UnsupportedVersionError", "ack", "decode", "encode", "error",
    "format_address", "ideal_delay", "parse", "parse_address", "request", "throttled_send",
    "to_frame",
]
