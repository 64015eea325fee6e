"""Typed payloads carried inside AISP frames."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union

from ..core import (
    DISEASE_TYPES,
    SKIN_COLORS,
    AnalysisReport,
    DiagnosisLabel,
    DiseaseType,
    ImageSample,
    SkinColorClass,
    Verdict,
)
from ..dataset import decode_sample, encode_sample
from ..errors import CorruptionError
from ..filter import SelectionBatch, SelectionEntry
from ..neuralnet.serialization import ModelParameters, deserialize_parameters
from .frames import Frame, MessageType


class Status(IntEnum):
    OK = 200
    ACCEPTED = 202
    IGNORED = 208
    NOT_MODIFIED = 304
    BAD_REQUEST = 400
    CONFLICT = 409
    UNPROCESSABLE = 422
    INTERNAL = 500
    UNAVAILABLE = 503
    STORAGE_RETRY = 507

    @property
    def retryable(self) -> bool:
        return self in (Status.UNAVAILABLE, Status.STORAGE_RETRY)


class MalformedPayload(CorruptionError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        st = struct.Struct("<" + fmt)
        if self.pos + st.size > len(self.buf):
            raise MalformedPayload("payload truncated")
        values = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return values if len(values) > 1 else values[0]

    def rest(self) -> bytes:
        out = self.buf[self.pos:]
        self.pos = len(self.buf)
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise MalformedPayload(f"{len(self.buf) - self.pos} trailing payload bytes")


def _disease(value: int) -> DiseaseType:
    if value >= len(DISEASE_TYPES):
        raise MalformedPayload(f"unknown disease type {value}")
    return DiseaseType(value)


def _color(value: int) -> SkinColorClass:
    if value >= len(SKIN_COLORS):
        raise MalformedPayload(f"unknown skin-color class {value}")
    return SkinColorClass(value)


# -- message bodies --------------------------------------------------------------


@dataclass(frozen=True)
class ImageSubmit:
    TYPE = MessageType.IMAGE_SUBMIT
    sample: ImageSample

    def to_payload(self) -> bytes:
        return encode_sample(self.sample)

    @classmethod
    def from_payload(cls, payload: bytes) -> "ImageSubmit":
        sample, end = decode_sample(payload, 0)
        if end != len(payload):
            raise MalformedPayload("trailing bytes after image")
        return cls(sample)


def _encode_report(report: AnalysisReport) -> bytes:
    out = bytearray(struct.pack("<QQBdB", report.sample_id, report.model_version,
                                int(report.skin_color), report.overall_score, len(report.verdicts)))
    for v in report.verdicts:
        out += struct.pack("<BdBQ", int(v.disease_type), v.p_positive, int(v.positive), v.model_version)
    return bytes(out)


def _decode_report(r: _Reader) -> AnalysisReport:
    sample_id, version, color, score, n = r.take("QQBdB")
    verdicts = []
    for _ in range(n):
        disease, p, positive, mv = r.take("BdBQ")
        verdicts.append(Verdict(_disease(disease), p, bool(positive), mv))
    try:
        return AnalysisReport(sample_id, tuple(verdicts), score, _color(color), version)
    except ValueError as exc:
        raise MalformedPayload(str(exc)) from None


@dataclass(frozen=True)
class Report:
    TYPE = MessageType.REPORT
    report: AnalysisReport

    def to_payload(self) -> bytes:
        return _encode_report(self.report)

    @classmethod
    def from_payload(cls, payload: bytes) -> "Report":
        r = _Reader(payload)
        out = cls(_decode_report(r))
        r.done()
        return out


@dataclass(frozen=True)
class MedicalNotify:
    TYPE = MessageType.MEDICAL_NOTIFY
    report: AnalysisReport

    def to_payload(self) -> bytes:
        return _encode_report(self.report)

    @classmethod
    def from_payload(cls, payload: bytes) -> "MedicalNotify":
        r = _Reader(payload)
        out = cls(_decode_report(r))
        r.done()
        return out


@dataclass(frozen=True)
class DataUpload:
    TYPE = MessageType.DATA_UPLOAD
    batch: SelectionBatch

    def to_payload(self) -> bytes:
        b = self.batch
        out = bytearray(struct.pack("<QBQI", b.round_id, int(b.skin_color),
                                    b.source_model_version, len(b.entries)))
        for e in b.entries:
            out += struct.pack("<BBd", int(e.pseudo_label.disease_type),
                               int(e.pseudo_label.positive), e.entropy_bits)
            out += encode_sample(e.sample)
        return bytes(out)

    @classmethod
    def from_payload(cls, payload: bytes) -> "DataUpload":
        r = _Reader(payload)
        round_id, color, version, n = r.take("QBQI")
        entries = []
        for _ in range(n):
            disease, positive, entropy = r.take("BBd")
            sample, r.pos = decode_sample(payload, r.pos)
            entries.append(SelectionEntry(sample, DiagnosisLabel(_disease(disease), bool(positive)),
                                          entropy))
        r.done()
        return cls(SelectionBatch(round_id, _color(color), tuple(entries), version))


@dataclass(frozen=True)
class ModelUpdate:
    """One disease model's parameter bundle, kept as the raw AISK bytes."""

    TYPE = MessageType.MODEL_UPDATE
    disease_type: DiseaseType
    bundle: bytes

    def to_payload(self) -> bytes:
        return struct.pack("<B", int(self.disease_type)) + self.bundle

    @classmethod
    def from_payload(cls, payload: bytes) -> "ModelUpdate":
        if not payload:
            raise MalformedPayload("empty model update")
        return cls(_disease(payload[0]), bytes(payload[1:]))

    def parameters(self, expected_config_hash=None) -> ModelParameters:
        return deserialize_parameters(self.bundle, expected_config_hash)


@dataclass(frozen=True)
class ModelPull:
    """Edge -> cloud: "these are my versions; I listen at ``edge_address``"."""

    TYPE = MessageType.MODEL_PULL
    versions: tuple = ()
    edge_address: str = ""

    def to_payload(self) -> bytes:
        out = bytearray(struct.pack("<B", len(self.versions)))
        for disease, version in self.versions:
            out += struct.pack("<BQ", int(disease), version)
        addr = self.edge_address.encode()
        return bytes(out + struct.pack("<H", len(addr)) + addr)

    @classmethod
    def from_payload(cls, payload: bytes) -> "ModelPull":
        r = _Reader(payload)
        n = r.take("B")
        versions = []
        for _ in range(n):
            disease, version = r.take("BQ")
            versions.append((_disease(disease), version))
        length = r.take("H")
        addr = r.rest()
        if len(addr) != length:
            raise MalformedPayload("address length mismatch")
        return cls(tuple(versions), addr.decode())


@dataclass(frozen=True)
class Ack:
    TYPE = MessageType.ACK
    status: int
    echoed_request_id: int
    detail: dict = field(default_factory=dict)

    def to_payload(self) -> bytes:
        blob = json.dumps(self.detail, sort_keys=True).encode() if self.detail else b""
        return struct.pack("<HQ", self.status, self.echoed_request_id) + blob

    @classmethod
    def from_payload(cls, payload: bytes) -> "Ack":
        r = _Reader(payload)
        status, echoed = r.take("HQ")
        blob = r.rest()
        try:
            detail = json.loads(blob) if blob else {}
        except ValueError:
            raise MalformedPayload("ACK detail is not JSON") from None
        return cls(status, echoed, detail)


@dataclass(frozen=True)
class ErrorMessage:
    TYPE = MessageType.ERROR
    status: int
    message: str = ""

    def to_payload(self) -> bytes:
        return struct.pack("<H", self.status) + self.message.encode()

    @classmethod
    def from_payload(cls, payload: bytes) -> "ErrorMessage":
        r = _Reader(payload)
        status = r.take("H")
        return cls(status, r.rest().decode(errors="replace"))


Message = Union[ImageSubmit, Report, DataUpload, ModelUpdate, ModelPull, MedicalNotify, Ack,
                ErrorMessage]

BODY_TYPES = {cls.TYPE: cls for cls in (ImageSubmit, Report, DataUpload, ModelUpdate, ModelPull,
                                        MedicalNotify, Ack, ErrorMessage)}


def to_frame(message: Message, request_id: int) -> Frame:
    return Frame(int(message.TYPE), request_id, message.to_payload())


def parse(frame: Frame) -> Message:
    """Typed body of ``frame``; raises MalformedPayload for unknown or garbled bodies."""
    cls = BODY_TYPES.get(frame.message_type)
    if cls is None:
        raise MalformedPayload(f"unknown message type {frame.message_type}")
    try:
        return cls.from_payload(frame.payload)
    except MalformedPayload:
        raise
    except (ValueError, struct.error, UnicodeDecodeError) as exc:
        raise MalformedPayload(str(exc)) from None


def ack(request: Frame, status: Status = Status.OK, **detail) -> Frame:
    return to_frame(Ack(int(status), request.request_id, detail), request.request_id)


def error(request_id: int, status: Status, message: str) -> Frame:
    return to_frame(ErrorMessage(int(status), message), request_id)
