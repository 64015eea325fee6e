"""Edge node: local inference and reports, entropy filtering of the unlabeled
pool, uploads to the cloud, and atomic application of pushed model updates."""

from __future__ import annotations

import csv
import itertools
import logging
import os
import queue
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    DISEASE_TYPES,
    AnalysisReport,
    DiseaseType,
    ImageSample,
    Metrics,
    Verdict,
)
from .dataset import encode_sample
from .errors import CorruptionError, IncompatibleModelError, NumericFaultError
from .filter import FilterConfig, classify_skin_color, score_and_filter
from .imaging import batch_from_samples
from .neuralnet import Model, deserialize_parameters, serialize_parameters
from .protocol import (
    DataUpload,
    Frame,
    FrameError,
    MalformedPayload,
    MedicalNotify,
    MessageType,
    ModelPull,
    Report,
    Status,
    TransmissionRecord,
    ack,
    decode,
    encode,
    error,
    parse,
    to_frame,
)
from .registry import AlgorithmRegistry

log = logging.getLogger(__name__)

DELAY_CSV_HEADER = ("request_id", "computation_s", "transmission_s", "total_s")


class Snapshot:
    """Immutable, versioned model for one disease type."""

    def __init__(self, disease_type: DiseaseType, model: Model):
        self.disease_type = DiseaseType(disease_type)
        self.model = model.freeze()
        self.version = model.version
        self.checksum = self._tensor_crc()

    def _tensor_crc(self) -> int:
        crc = 0
        for t in self.model.tensors():
            crc = zlib.crc32(np.ascontiguousarray(t, dtype="<f4").tobytes(), crc)
        return crc

    def verify(self) -> bool:
        return self._tensor_crc() == self.checksum

    def predict(self, samples: Sequence[ImageSample]) -> np.ndarray:
        cfg = self.model.config
        x = batch_from_samples(samples, cfg.input_height, cfg.input_width)
        return self.model.forward(x, training=False).astype(np.float64)

    def bundle(self) -> bytes:
        return serialize_parameters(self.model.to_parameters())

    @classmethod
    def from_bundle(cls, disease_type: DiseaseType, bundle: bytes,
                    registry: AlgorithmRegistry) -> "Snapshot":
        params = deserialize_parameters(bundle)
        config = registry.by_hash(params.config_hash).config
        return cls(disease_type, Model.from_parameters(config, params))


@dataclass(frozen=True)
class DelayRecord:
    request_id: int
    computation_s: float
    transmission_s: float
    total_s: float

    @classmethod
    def of(cls, request_id: int, computation_s: float, transmission_s: float) -> "DelayRecord":
        return cls(request_id, computation_s, transmission_s, computation_s + transmission_s)


@dataclass
class EdgeConfig:
    filter: FilterConfig = field(default_factory=FilterConfig)
    pool_capacity: int = 1024
    filter_period_s: float = 10.0
    pool_trigger_fraction: float = 0.75
    bandwidth_bps: Optional[float] = 2_000_000.0
    metrics_path: Optional[str] = None
    spool_dir: Optional[str] = None
    listen_address: str = ""
    backoff_base_s: float = 1.0
    backoff_cap_s: float = 60.0
    score_weights: Optional[dict] = None


@dataclass
class FilterRound:
    round_id: int
    frames: list
    decisions: dict
    pooled_samples: int
    uploaded_samples: int
    pooled_bytes: int
    uploaded_bytes: int
    delivered: int = 0
    spooled: int = 0


@dataclass
class _PoolEntry:
    sample: ImageSample
    size: int


class EdgeNode:
    def __init__(self, config: Optional[EdgeConfig] = None,
                 registry: Optional[AlgorithmRegistry] = None,
                 snapshots: Optional[dict] = None, cloud_link=None):
        self.config = config or EdgeConfig()
        self.registry = registry or AlgorithmRegistry()
        self.cloud_link = cloud_link
        self.metrics = Metrics()
        self._snapshots: dict = dict(snapshots or {})
        self._swap_lock = threading.Lock()
        self.version_log: list = []
        self._pool: deque = deque()
        self._pool_lock = threading.Lock()
        self._delays: list = []
        self._delay_lock = threading.Lock()
        self._round_ids = itertools.count(1)
        self._filter_lock = threading.Lock()
        self._spool_lock = threading.Lock()
        self._spool_seq = itertools.count()
        self._spool_failures = 0
        self._next_spool_attempt = 0.0
        self._mem_spool: list = []
        self._request_ids = itertools.count(1 << 32)
        self._notify_queue: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self._wake_filter = threading.Event()
        self._threads: list = []
        if self.config.spool_dir:
            Path(self.config.spool_dir).mkdir(parents=True, exist_ok=True)

    # -- snapshots -----------------------------------------------------------------

    @property
    def snapshots(self) -> dict:
        return self._snapshots

    def versions(self) -> dict:
        return {d: s.version for d, s in self._snapshots.items()}

    def install(self, snapshot: Snapshot) -> bool:
        """Swap in ``snapshot`` iff it is newer; readers see the old or new dict, never a mix."""
        with self._swap_lock:
            current = self._snapshots.get(snapshot.disease_type)
            if current is not None and snapshot.version <= current.version:
                return False
            updated = dict(self._snapshots)
            updated[snapshot.disease_type] = snapshot
            self._snapshots = updated
            self.version_log.append((snapshot.disease_type, snapshot.version))
            return True

    # -- frame dispatch ------------------------------------------------------------

    def handle_frame(self, frame: Frame, record: Optional[TransmissionRecord] = None,
                     peer=None) -> Frame:
        self.metrics.incr("frames_in")
        try:
            if frame.message_type == MessageType.IMAGE_SUBMIT:
                return self.handle_image_submit(frame, record)
            if frame.message_type == MessageType.MODEL_UPDATE:
                return self.apply_model_update(frame)
        except Exception as exc:
            log.exception("edge failed on request %d", frame.request_id)
            return error(frame.request_id, Status.INTERNAL, str(exc))
        self.metrics.incr("frames_rejected")
        return error(frame.request_id, Status.BAD_REQUEST,
                     f"message type {frame.message_type} not accepted by the edge")

    def on_stream_error(self, exc: Exception, peer) -> Optional[Frame]:
        self.metrics.incr("decode_errors")
        request_id = getattr(exc, "request_id", None) or 0
        if isinstance(exc, FrameError):
            return error(request_id, Status.BAD_REQUEST, f"undecodable frame: {exc}")
        return None

    # -- terminal path -------------------------------------------------------------

    def handle_image_submit(self, frame: Frame,
                            record: Optional[TransmissionRecord] = None) -> Frame:
        start = time.perf_counter()
        try:
            sample = parse(frame).sample
        except (MalformedPayload, ValueError) as exc:
            self.metrics.incr("malformed_images")
            return error(frame.request_id, Status.BAD_REQUEST, f"malformed image: {exc}")
        snapshots = self._snapshots
        missing = [d.name for d in DISEASE_TYPES if d not in snapshots]
        if missing:
            return error(frame.request_id, Status.UNAVAILABLE,
                         f"models unavailable for {', '.join(missing)}; retry after the next update")
        skin_color = classify_skin_color(sample)
        verdicts = []
        for disease in DISEASE_TYPES:
            snap = snapshots[disease]
            if not snap.verify():
                self.metrics.incr("snapshot_checksum_failures")
                return error(frame.request_id, Status.INTERNAL, f"snapshot {disease.name} corrupted")
            try:
                probs = snap.predict([sample])[0]
            except NumericFaultError as exc:
                return error(frame.request_id, Status.INTERNAL, str(exc))
            verdicts.append(Verdict.from_probability(disease, probs[1], snap.version))
        report = AnalysisReport.build(sample.sample_id, verdicts, skin_color,
                                      self.config.score_weights)
        computation = time.perf_counter() - start
        self._add_to_pool(ImageSample(sample.pixels, sample.width, sample.height,
                                      sample.sample_id, skin_color))
        transmission = record.measured_delay_s if record is not None else 0.0
        self._record_delay(DelayRecord.of(frame.request_id, computation, transmission))
        self.metrics.incr("reports")
        if self.cloud_link is not None:
            self._notify_queue.put(report)
        return to_frame(Report(report), frame.request_id)

    def _add_to_pool(self, sample: ImageSample) -> None:
        with self._pool_lock:
            if len(self._pool) >= self.config.pool_capacity:
                self._pool.popleft()
                self.metrics.incr("pool_evictions")
            self._pool.append(_PoolEntry(sample, len(encode_sample(sample))))
            size = len(self._pool)
        if size >= self.config.pool_trigger_fraction * self.config.pool_capacity:
            self._wake_filter.set()

    def add_unlabeled(self, samples: Sequence[ImageSample]) -> None:
        for s in samples:
            self._add_to_pool(ImageSample(s.pixels, s.width, s.height, s.sample_id,
                                          classify_skin_color(s)))

    def pool_size(self) -> int:
        with self._pool_lock:
            return len(self._pool)

    def _record_delay(self, rec: DelayRecord) -> None:
        with self._delay_lock:
            self._delays.append(rec)
            path = self.config.metrics_path
            if path:
                new = not os.path.exists(path)
                with open(path, "a", newline="") as fh:
                    writer = csv.writer(fh)
                    if new:
                        writer.writerow(DELAY_CSV_HEADER)
                    writer.writerow([rec.request_id, f"{rec.computation_s:.9f}",
                                     f"{rec.transmission_s:.9f}", f"{rec.total_s:.9f}"])

    def delay_records(self, since: int = 0) -> list:
        with self._delay_lock:
            return list(self._delays[since:])

    # -- filtering and upload ------------------------------------------------------

    def run_filter_round(self) -> FilterRound:
        """Score the whole pool against every snapshot and upload the selections.

        One DATA_UPLOAD frame per non-empty (disease, skin color) batch. Every
        scored entry leaves the pool: accepted ones are uploaded, the rest dropped.
        """
        with self._filter_lock:
            with self._pool_lock:
                entries = list(self._pool)
                self._pool.clear()
            round_id = next(self._round_ids)
            samples = [e.sample for e in entries]
            sizes = {e.sample.sample_id: e.size for e in entries}
            frames, decisions, uploaded_ids = [], {}, set()
            if samples:
                snapshots = self._snapshots
                for disease in DISEASE_TYPES:
                    snap = snapshots.get(disease)
                    if snap is None:
                        continue
                    batches, decs = score_and_filter(samples, snap, self.config.filter, round_id)
                    decisions[disease] = decs
                    for batch in batches.values():
                        uploaded_ids.update(e.sample.sample_id for e in batch.entries)
                        frames.append(to_frame(DataUpload(batch), self._next_request_id()))
            result = FilterRound(
                round_id=round_id, frames=frames, decisions=decisions,
                pooled_samples=len(samples), uploaded_samples=len(uploaded_ids),
                pooled_bytes=sum(sizes.values()),
                uploaded_bytes=sum(sizes[i] for i in uploaded_ids),
            )
            self.metrics.incr("filter_rounds")
            self.metrics.incr("filter_scored", len(samples))
            self.metrics.incr("filter_uploaded", len(uploaded_ids))
            self.metrics.incr("filter_dropped", len(samples) - len(uploaded_ids))
            for f in frames:
                if self._deliver(f):
                    result.delivered += 1
                else:
                    result.spooled += 1
            log.info("filter round %d: %d pooled, %d uploaded, %d frames",
                     round_id, len(samples), len(uploaded_ids), len(frames))
            return result

    def _next_request_id(self) -> int:
        return next(self._request_ids)

    def _deliver(self, frame: Frame) -> bool:
        if self.cloud_link is not None:
            try:
                reply = self.cloud_link.exchange(frame)
                if reply.message_type == MessageType.ACK:
                    self.metrics.incr("uploads_acked")
                    return True
                body = parse(reply)
                if not Status(body.status).retryable:
                    log.error("cloud rejected upload %d: %s", frame.request_id, body.message)
                    self.metrics.incr("uploads_rejected")
                    return True
            except (OSError, CorruptionError) as exc:
                log.warning("cloud unreachable (%s); spooling frame %d", exc, frame.request_id)
        self._spool(frame)
        return False

    def _spool(self, frame: Frame) -> None:
        self.metrics.incr("uploads_spooled")
        if not self.config.spool_dir:
            self._memory_spool().append(encode(frame))
            return
        with self._spool_lock:
            name = f"{time.time_ns():020d}-{next(self._spool_seq):06d}.aisp"
            path = Path(self.config.spool_dir) / name
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(encode(frame))
            os.replace(tmp, path)

    def _memory_spool(self) -> list:
        return self._mem_spool

    def spooled(self) -> int:
        if self.config.spool_dir:
            return len(list(Path(self.config.spool_dir).glob("*.aisp")))
        return len(self._memory_spool())

    def backoff_delay(self) -> float:
        if self._spool_failures == 0:
            return 0.0
        return min(self.config.backoff_cap_s,
                   self.config.backoff_base_s * 2 ** (self._spool_failures - 1))

    def retry_spool(self, now: Optional[float] = None) -> int:
        """Resend spooled frames in order; stops at the first failure and backs off."""
        now = time.monotonic() if now is None else now
        if self.cloud_link is None or now < self._next_spool_attempt:
            return 0
        sent = 0
        with self._spool_lock:
            if self.config.spool_dir:
                items = [(p, p.read_bytes()) for p in sorted(Path(self.config.spool_dir).glob("*.aisp"))]
            else:
                items = [(None, b) for b in self._memory_spool()]
            for path, data in items:
                try:
                    reply = self.cloud_link.exchange(decode(data))
                except (OSError, CorruptionError):
                    self._spool_failures += 1
                    self._next_spool_attempt = now + self.backoff_delay()
                    return sent
                if reply.message_type == MessageType.ERROR and Status(parse(reply).status).retryable:
                    self._spool_failures += 1
                    self._next_spool_attempt = now + self.backoff_delay()
                    return sent
                if path is not None:
                    path.unlink()
                else:
                    self._memory_spool().remove(data)
                sent += 1
            self._spool_failures = 0
            self._next_spool_attempt = 0.0
        self.metrics.incr("spool_resent", sent)
        return sent

    # -- model updates -------------------------------------------------------------

    def apply_model_update(self, frame: Frame) -> Frame:
        try:
            update = parse(frame)
            params = update.parameters()
            config = self.registry.by_hash(params.config_hash).config
            current = self._snapshots.get(update.disease_type)
            if current is not None and current.model.config.config_hash != params.config_hash:
                raise IncompatibleModelError(
                    f"update for {config.name}, edge runs {current.model.config.name}"
                )
            snapshot = Snapshot(update.disease_type, Model.from_parameters(config, params))
        except IncompatibleModelError as exc:
            self.metrics.incr("updates_incompatible")
            return error(frame.request_id, Status.CONFLICT, str(exc))
        except (CorruptionError, ValueError) as exc:
            self.metrics.incr("updates_corrupt")
            return error(frame.request_id, Status.UNPROCESSABLE, f"rejected update: {exc}")
        if self.install(snapshot):
            self.metrics.incr("updates_applied")
            return ack(frame, Status.ACCEPTED, disease=int(update.disease_type),
                       version=snapshot.version)
        self.metrics.incr("updates_ignored")
        return ack(frame, Status.IGNORED, disease=int(update.disease_type),
                   version=self._snapshots[update.disease_type].version)

    def pull_models(self) -> Optional[Frame]:
        """Announce current versions (and our address) to the cloud."""
        if self.cloud_link is None:
            return None
        pull = ModelPull(tuple(sorted(self.versions().items())), self.config.listen_address)
        try:
            return self.cloud_link.exchange(to_frame(pull, self._next_request_id()))
        except (OSError, CorruptionError) as exc:
            log.warning("model pull failed: %s", exc)
            return None

    # -- background activity -------------------------------------------------------

    def _notify_loop(self) -> None:
        while not self._stop.is_set():
            try:
                report = self._notify_queue.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                reply = self.cloud_link.exchange(to_frame(MedicalNotify(report),
                                                          self._next_request_id()))
                if reply.message_type != MessageType.ACK:
                    self.metrics.incr("notify_failures")
            except (OSError, CorruptionError) as exc:
                self.metrics.incr("notify_failures")
                log.warning("medical notification for %d not delivered: %s", report.sample_id, exc)

    def _filter_loop(self) -> None:
        while not self._stop.is_set():
            self._wake_filter.wait(timeout=self.config.filter_period_s)
            self._wake_filter.clear()
            if self._stop.is_set():
                break
            try:
                if self.pool_size():
                    self.run_filter_round()
                self.retry_spool()
            except Exception:
                log.exception("filter round failed")

    def start(self) -> "EdgeNode":
        self._stop.clear()
        for target in (self._filter_loop, self._notify_loop):
            t = threading.Thread(target=target, name=f"edge-{target.__name__}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        self._wake_filter.set()
        for t in self._threads:
            t.join(timeout=5)
        self._threads.clear()


def load_snapshots(directory, registry: AlgorithmRegistry) -> dict:
    """Read ``<disease>.aisk`` parameter files from ``directory``."""
    out = {}
    for disease in DISEASE_TYPES:
        path = Path(directory) / f"{disease.slug}.aisk"
        if path.exists():
            out[disease] = Snapshot.from_bundle(disease, path.read_bytes(), registry)
    return out
