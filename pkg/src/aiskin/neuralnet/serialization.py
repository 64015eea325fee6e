"""Binary parameter bundle format ("AISK").

Little-endian layout::

    magic "AISK" | format u16 | model_version u64 | config_hash u64 | count u32
    | per tensor: rank u8, dims u32 x rank, f32 payload
    | CRC32 of everything after the magic
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import CorruptionError, IncompatibleModelError

MAGIC = b"AISK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<HQQI")


@dataclass
class ModelParameters:
    model_version: int
    config_hash: int
    tensors: list = field(default_factory=list)
    checksum: Optional[int] = None

    def __eq__(self, other):
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return (
            self.model_version == other.model_version
            and self.config_hash == other.config_hash
            and len(self.tensors) == len(other.tensors)
            and all(
                a.shape == b.shape and np.asarray(a, "<f4").tobytes() == np.asarray(b, "<f4").tobytes()
                for a, b in zip(self.tensors, other.tensors)
            )
        )

    def with_version(self, version: int) -> "ModelParameters":
        return ModelParameters(version, self.config_hash, list(self.tensors))

    def tensor_checksum(self) -> int:
        """CRC32 over the raw tensor bytes; cheap consistency check for snapshots."""
        crc = 0
        for t in self.tensors:
            crc = zlib.crc32(np.ascontiguousarray(t, dtype="<f4").tobytes(), crc)
        return crc


def serialize_parameters(params: ModelParameters) -> bytes:
    body = bytearray(_HEADER.pack(FORMAT_VERSION, params.model_version, params.config_hash,
                                  len(params.tensors)))
    for t in params.tensors:
        t = np.ascontiguousarray(t, dtype="<f4")
        if t.ndim > 255:
            raise ValueError("tensor rank exceeds 255")
        body += struct.pack("<B", t.ndim)
        body += struct.pack(f"<{t.ndim}I", *t.shape)
        body += t.tobytes()
    crc = zlib.crc32(body)
    params.checksum = crc
    return MAGIC + bytes(body) + struct.pack("<I", crc)


def deserialize_parameters(data: bytes, expected_config_hash: Optional[int] = None) -> ModelParameters:
    data = bytes(data)
    if len(data) < len(MAGIC) + _HEADER.size + 4:
        raise CorruptionError("parameter bundle truncated")
    if data[:4] != MAGIC:
        raise CorruptionError(f"bad magic {data[:4]!r}")
    body, (crc,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptionError("parameter bundle checksum mismatch")
    fmt, version, config_hash, count = _HEADER.unpack_from(body, 0)
    if fmt != FORMAT_VERSION:
        raise CorruptionError(f"unsupported parameter format {fmt}")
    if expected_config_hash is not None and config_hash != expected_config_hash:
        raise IncompatibleModelError(
            f"bundle config hash {config_hash:#018x} != expected {expected_config_hash:#018x}"
        )
    pos = _HEADER.size
    tensors = []
    try:
        for _ in range(count):
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * n > len(body):
                raise CorruptionError("tensor payload truncated")
            tensors.append(np.frombuffer(body, dtype="<f4", count=n, offset=pos)
                           .reshape(dims).astype(np.float32))
            pos += 4 * n
    except struct.error as exc:
        raise CorruptionError(f"malformed tensor header: {exc}") from None
    if pos != len(body):
        raise CorruptionError(f"{len(body) - pos} trailing bytes after tensors")
    return ModelParameters(version, config_hash, tensors, crc)
