"""Cloud node: partitioned pseudo-label store, retraining through the algorithm
registry, versioned pushes to registered edges, and medical-site notification."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    DISEASE_TYPES,
    SKIN_COLORS,
    AnalysisReport,
    DiseaseType,
    ImageSample,
    Metrics,
    SkinColorClass,
)
from .dataset import load_dataset, save_dataset
from .errors import CorruptionError, NumericFaultError
from .filter import SelectionBatch
from .imaging import batch_from_samples
from .links import TcpLink
from .neuralnet import Model, iterate_minibatches, one_hot
from .protocol import (
    Frame,
    FrameServer,
    MalformedPayload,
    MedicalNotify,
    MessageType,
    ModelUpdate,
    Status,
    ack,
    error,
    parse,
    to_frame,
)
from .registry import AlgorithmRegistry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Provenance:
    sample_id: int
    disease_type: int
    positive: bool
    source_model_version: int
    entropy_bits: float
    round_id: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


class PartitionedStore:
    """Append-only pseudo-labeled samples per (disease type, skin color).

    Each partition is a dataset file (labels = pseudo-labels) plus a
    ``.prov.jsonl`` sidecar with one provenance line per sample.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._samples: dict = defaultdict(list)
        self._prov: dict = defaultdict(list)
        self._seen: dict = defaultdict(set)
        self._load()

    def _paths(self, disease: DiseaseType, color: SkinColorClass):
        stem = f"{disease.slug}_{color.name.lower()}"
        return self.root / f"{stem}.aisd", self.root / f"{stem}.prov.jsonl"

    def _load(self) -> None:
        for disease in DISEASE_TYPES:
            for color in SKIN_COLORS:
                data_path, prov_path = self._paths(disease, color)
                if not data_path.exists():
                    continue
                prov = {}
                if prov_path.exists():
                    for line in prov_path.read_text().splitlines():
                        if line.strip():
                            p = Provenance(**json.loads(line))
                            prov[p.sample_id] = p
                key = (disease, color)
                for s in load_dataset(data_path):
                    # a sample without provenance was written by an interrupted append
                    if s.sample_id in prov:
                        self._samples[key].append(s)
                        self._prov[key].append(prov[s.sample_id])
                        self._seen[disease].add(s.sample_id)

    def append(self, disease: DiseaseType, color: SkinColorClass, samples: Sequence[ImageSample],
               provenance: Sequence[Provenance]) -> tuple:
        """Append new samples; returns (stored, duplicates)."""
        disease, color = DiseaseType(disease), SkinColorClass(color)
        with self._lock:
            seen = self._seen[disease]
            fresh = []
            for s, p in zip(samples, provenance):
                if s.sample_id in seen:
                    continue
                seen.add(s.sample_id)
                fresh.append((s, p))
            if not fresh:
                return 0, len(samples)
            key = (disease, color)
            data_path, prov_path = self._paths(disease, color)
            try:
                with open(prov_path, "a") as fh:
                    for _, p in fresh:
                        fh.write(p.to_json() + "\n")
                    fh.flush()
                    os.fsync(fh.fileno())
                save_dataset(data_path, self._samples[key] + [s for s, _ in fresh])
            except OSError:
                for s, _ in fresh:
                    seen.discard(s.sample_id)
                raise
            self._samples[key].extend(s for s, _ in fresh)
            self._prov[key].extend(p for _, p in fresh)
            return len(fresh), len(samples) - len(fresh)

    def partition(self, disease: DiseaseType, color: SkinColorClass) -> list:
        with self._lock:
            return list(self._samples[(DiseaseType(disease), SkinColorClass(color))])

    def provenance(self, disease: DiseaseType, color: SkinColorClass) -> list:
        with self._lock:
            return list(self._prov[(DiseaseType(disease), SkinColorClass(color))])

    def count(self, disease: DiseaseType, color: Optional[SkinColorClass] = None) -> int:
        with self._lock:
            if color is not None:
                return len(self._samples[(DiseaseType(disease), SkinColorClass(color))])
            return sum(len(self._samples[(DiseaseType(disease), c)]) for c in SKIN_COLORS)

    def sizes(self) -> dict:
        with self._lock:
            return {f"{d.slug}/{c.name.lower()}": len(self._samples[(d, c)])
                    for d in DISEASE_TYPES for c in SKIN_COLORS}


@dataclass
class EdgeRecord:
    address: str
    versions: dict = field(default_factory=dict)
    failures: int = 0
    next_attempt: float = 0.0


class EdgeDirectory:
    def __init__(self):
        self._lock = threading.Lock()
        self._edges: dict = {}

    def register(self, address: str, versions: Optional[dict] = None) -> EdgeRecord:
        with self._lock:
            rec = self._edges.setdefault(address, EdgeRecord(address))
            if versions is not None:
                rec.versions = {DiseaseType(d): int(v) for d, v in versions.items()}
            rec.failures = 0
            rec.next_attempt = 0.0
            return rec

    def edges(self) -> list:
        with self._lock:
            return list(self._edges.values())

    def get(self, address: str) -> Optional[EdgeRecord]:
        with self._lock:
            return self._edges.get(address)


@dataclass
class CloudConfig:
    storage_dir: str = "cloud-data"
    algorithm: str = "TinyLeNet"
    epochs_per_round: int = 1
    # fine-tuning rate as a fraction of the configuration's learning rate
    fine_tune_scale: float = 0.25
    min_new_samples: int = 32
    medical_address: Optional[str] = None
    seed: int = 0
    push_period_s: float = 5.0
    backoff_base_s: float = 1.0
    backoff_cap_s: float = 60.0
    link_factory: Callable = TcpLink


@dataclass(frozen=True)
class RetrainResult:
    disease_type: DiseaseType
    retrained: bool
    version: int
    reason: str = ""
    labeled_samples: int = 0
    pseudo_samples: int = 0
    mean_loss: float = float("nan")


@dataclass(frozen=True)
class PushResult:
    edge: str
    disease_type: DiseaseType
    status: str  # accepted, ignored, failed, rejected
    version: int
    detail: str = ""


class CloudNode:
    def __init__(self, config: Optional[CloudConfig] = None,
                 registry: Optional[AlgorithmRegistry] = None):
        self.config = config or CloudConfig()
        self.registry = registry or AlgorithmRegistry()
        self.registry.activate(self.config.algorithm)
        self.root = Path(self.config.storage_dir)
        for sub in ("labeled", "partitions", "checkpoints", "models"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.store = PartitionedStore(self.root / "partitions")
        self.edges = EdgeDirectory()
        self.metrics = Metrics()
        self.medical_link = (self.config.link_factory(self.config.medical_address)
                             if self.config.medical_address else None)
        self._models: dict = {}
        self._bundles: dict = {}
        self._labeled: dict = {}
        self._consumed: dict = {d: 0 for d in DISEASE_TYPES}
        self._model_lock = threading.Lock()
        self._train_locks = {d: threading.Lock() for d in DISEASE_TYPES}
        self._push_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._load_state()

    # -- persisted state -----------------------------------------------------------

    def _state_path(self) -> Path:
        return self.root / "state.json"

    def _save_state(self) -> None:
        tmp = self._state_path().with_suffix(".tmp")
        tmp.write_text(json.dumps({d.slug: n for d, n in self._consumed.items()}, sort_keys=True))
        os.replace(tmp, self._state_path())

    def _load_state(self) -> None:
        if self._state_path().exists():
            consumed = json.loads(self._state_path().read_text())
            self._consumed = {d: int(consumed.get(d.slug, 0)) for d in DISEASE_TYPES}
        for disease in DISEASE_TYPES:
            path = self.root / "labeled" / f"{disease.slug}.aisd"
            if path.exists():
                self._labeled[disease] = load_dataset(path)
            bundle_path = self.root / "models" / f"{disease.slug}.aisk"
            if bundle_path.exists():
                bundle = bundle_path.read_bytes()
                factory = self.registry.active(disease)
                self._models[disease] = factory.deserialize(bundle, self.config.seed)
                self._bundles[disease] = bundle

    def set_labeled(self, disease: DiseaseType, samples: Sequence[ImageSample]) -> None:
        disease = DiseaseType(disease)
        save_dataset(self.root / "labeled" / f"{disease.slug}.aisd", samples)
        self._labeled[disease] = list(samples)

    def publish(self, disease: DiseaseType, model: Model) -> bytes:
        """Make ``model`` the current version for ``disease`` and persist it."""
        disease = DiseaseType(disease)
        factory = self.registry.active(disease)
        bundle = factory.serialize(model)
        (self.root / "checkpoints" / f"{disease.slug}_v{model.version}.aisk").write_bytes(bundle)
        current = self.root / "models" / f"{disease.slug}.aisk"
        tmp = current.with_suffix(".tmp")
        tmp.write_bytes(bundle)
        os.replace(tmp, current)
        with self._model_lock:
            self._models[disease] = model
            self._bundles[disease] = bundle
        return bundle

    def versions(self) -> dict:
        with self._model_lock:
            return {d: m.version for d, m in self._models.items()}

    def model(self, disease: DiseaseType) -> Optional[Model]:
        with self._model_lock:
            return self._models.get(DiseaseType(disease))

    def bundle(self, disease: DiseaseType) -> Optional[bytes]:
        with self._model_lock:
            return self._bundles.get(DiseaseType(disease))

    def new_samples(self, disease: DiseaseType) -> int:
        return self.store.count(disease) - self._consumed[DiseaseType(disease)]

    # -- frame dispatch ------------------------------------------------------------

    def handle_frame(self, frame: Frame, record=None, peer=None) -> Frame:
        self.metrics.incr("frames_in")
        try:
            if frame.message_type == MessageType.DATA_UPLOAD:
                return self.handle_data_upload(frame)
            if frame.message_type == MessageType.MODEL_PULL:
                return self.handle_model_pull(frame)
            if frame.message_type == MessageType.MEDICAL_NOTIFY:
                return self.handle_medical_notify(frame)
        except Exception as exc:
            log.exception("cloud failed on request %d", frame.request_id)
            return error(frame.request_id, Status.INTERNAL, str(exc))
        return error(frame.request_id, Status.BAD_REQUEST,
                     f"message type {frame.message_type} not accepted by the cloud")

    def on_stream_error(self, exc: Exception, peer) -> Optional[Frame]:
        self.metrics.incr("decode_errors")
        return error(getattr(exc, "request_id", None) or 0, Status.BAD_REQUEST,
                     f"undecodable frame: {exc}")

    def handle_data_upload(self, frame: Frame) -> Frame:
        try:
            batch: SelectionBatch = parse(frame).batch
        except MalformedPayload as exc:
            self.metrics.incr("uploads_malformed")
            return error(frame.request_id, Status.BAD_REQUEST, f"malformed batch: {exc}")
        by_disease = defaultdict(lambda: ([], []))
        for e in batch.entries:
            samples, prov = by_disease[e.pseudo_label.disease_type]
            samples.append(ImageSample(e.sample.pixels, e.sample.width, e.sample.height,
                                       e.sample.sample_id, batch.skin_color, e.pseudo_label))
            prov.append(Provenance(e.sample.sample_id, int(e.pseudo_label.disease_type),
                                   e.pseudo_label.positive, batch.source_model_version,
                                   e.entropy_bits, batch.round_id))
        stored = duplicates = 0
        try:
            for disease, (samples, prov) in by_disease.items():
                s, d = self.store.append(disease, batch.skin_color, samples, prov)
                stored, duplicates = stored + s, duplicates + d
        except OSError as exc:
            self.metrics.incr("storage_failures")
            return error(frame.request_id, Status.STORAGE_RETRY, f"storage failure: {exc}")
        self.metrics.incr("samples_stored", stored)
        self.metrics.incr("samples_duplicate", duplicates)
        return ack(frame, Status.OK, stored=stored, duplicates=duplicates)

    def handle_model_pull(self, frame: Frame) -> Frame:
        try:
            pull = parse(frame)
        except MalformedPayload as exc:
            return error(frame.request_id, Status.BAD_REQUEST, str(exc))
        if pull.edge_address:
            self.edges.register(pull.edge_address, dict(pull.versions))
        return ack(frame, Status.OK, versions={d.slug: v for d, v in self.versions().items()})

    def handle_medical_notify(self, frame: Frame) -> Frame:
        try:
            report = parse(frame).report
        except MalformedPayload as exc:
            return error(frame.request_id, Status.BAD_REQUEST, str(exc))
        delivered = self.notify_medical_site(report)
        return ack(frame, Status.OK, delivered=delivered)

    # -- retraining ----------------------------------------------------------------

    def pseudo_labeled(self, disease: DiseaseType, first: Optional[SkinColorClass] = None) -> list:
        """All stored samples for ``disease``, the ``first`` partition leading."""
        colors = list(SKIN_COLORS)
        if first is not None:
            colors.remove(first)
            colors.insert(0, first)
        out = []
        for c in colors:
            out.extend(self.store.partition(disease, c))
        return out

    def _busiest_new_partition(self, disease: DiseaseType) -> SkinColorClass:
        return max(SKIN_COLORS, key=lambda c: (self.store.count(disease, c), -int(c)))

    def retrain_round(self, disease: DiseaseType) -> RetrainResult:
        disease = DiseaseType(disease)
        lock = self._train_locks[disease]
        with lock:
            current = self.model(disease)
            version = current.version if current is not None else 0
            if current is None:
                return RetrainResult(disease, False, version, "no baseline model")
            total = self.store.count(disease)
            fresh = total - self._consumed[disease]
            if fresh < self.config.min_new_samples:
                return RetrainResult(disease, False, version,
                                     f"{fresh} new samples, need {self.config.min_new_samples}")
            labeled = self._labeled.get(disease, [])
            pseudo = self.pseudo_labeled(disease, self._busiest_new_partition(disease))
            samples = labeled + pseudo
            cfg = current.config
            x = batch_from_samples(samples, cfg.input_height, cfg.input_width)
            y = np.array([int(s.truth_label.positive) for s in samples], dtype=np.int64)
            model = current.copy()
            model.version = version + 1
            seed = (self.config.seed, int(disease), model.version)
            rng = np.random.default_rng(seed)
            model.reseed(rng.integers(2**63))
            factory = self.registry.active(disease)
            losses = []
            try:
                for _ in range(self.config.epochs_per_round):
                    batches = ((xb, one_hot(yb)) for xb, yb in
                               iterate_minibatches(x, y, cfg.train_batch, rng))
                    loss = factory.train_epoch(model, batches,
                                               cfg.learning_rate * self.config.fine_tune_scale)
                    if not np.isfinite(loss):
                        raise NumericFaultError("training", f"loss became {loss}")
                    losses.append(loss)
            except NumericFaultError as exc:
                self.metrics.incr("retrain_aborted")
                log.error("retrain of %s aborted: %s", disease.name, exc)
                return RetrainResult(disease, False, version, f"numeric fault: {exc}")
            self.publish(disease, model)
            self._consumed[disease] = total
            self._save_state()
            self.metrics.incr("retrain_rounds")
            log.info("retrained %s to v%d on %d labeled + %d pseudo-labeled samples",
                     disease.name, model.version, len(labeled), len(pseudo))
            return RetrainResult(disease, True, model.version, "", len(labeled), len(pseudo),
                                 float(np.mean(losses)) if losses else float("nan"))

    # -- pushes --------------------------------------------------------------------

    def _backoff(self, rec: EdgeRecord) -> float:
        return min(self.config.backoff_cap_s, self.config.backoff_base_s * 2 ** (rec.failures - 1))

    def push_updates(self, now: Optional[float] = None, ignore_backoff: bool = False) -> list:
        """Send MODEL_UPDATE to every edge behind the current version."""
        now = time.monotonic() if now is None else now
        results = []
        with self._push_lock:
            current = self.versions()
            for rec in self.edges.edges():
                if not ignore_backoff and now < rec.next_attempt:
                    continue
                link = self.config.link_factory(rec.address)
                failed = False
                for disease, version in sorted(current.items()):
                    if rec.versions.get(disease, -1) >= version:
                        continue
                    result = self._push_one(link, rec, disease)
                    results.append(result)
                    if result.status == "failed":
                        failed = True
                        break
                if failed:
                    rec.failures += 1
                    rec.next_attempt = now + self._backoff(rec)
                else:
                    rec.failures = 0
                    rec.next_attempt = 0.0
        return results

    def _push_one(self, link, rec: EdgeRecord, disease: DiseaseType) -> PushResult:
        with self._model_lock:
            bundle = self._bundles[disease]
            version = self._models[disease].version
        frame = to_frame(ModelUpdate(disease, bundle), (int(disease) << 56) | version)
        try:
            reply = link.exchange(frame)
            body = parse(reply)
        except (OSError, CorruptionError) as exc:
            self.metrics.incr("push_failures")
            log.warning("push of %s v%d to %s failed: %s", disease.name, version, rec.address, exc)
            return PushResult(rec.address, disease, "failed", rec.versions.get(disease, -1), str(exc))
        if reply.message_type == MessageType.ACK:
            reported = int(body.detail.get("version", version))
            rec.versions[disease] = reported
            status = "accepted" if body.status == Status.ACCEPTED else "ignored"
            self.metrics.incr(f"push_{status}")
            return PushResult(rec.address, disease, status, reported)
        self.metrics.incr("push_rejected")
        return PushResult(rec.address, disease, "rejected", rec.versions.get(disease, -1),
                          getattr(body, "message", ""))

    # -- medical site --------------------------------------------------------------

    def notify_medical_site(self, report: AnalysisReport) -> bool:
        if self.medical_link is None:
            return False
        try:
            reply = self.medical_link.exchange(to_frame(MedicalNotify(report), report.sample_id))
        except (OSError, CorruptionError) as exc:
            self.metrics.incr("medical_notify_failures")
            log.warning("medical site unreachable: %s", exc)
            return False
        if reply.message_type != MessageType.ACK:
            self.metrics.incr("medical_notify_failures")
            return False
        self.metrics.incr("medical_notified")
        return True

    # -- background ----------------------------------------------------------------

    def _loop(self) -> None:
        while not self._stop.wait(self.config.push_period_s):
            try:
                for disease in DISEASE_TYPES:
                    if self.new_samples(disease) >= self.config.min_new_samples:
                        self.retrain_round(disease)
                self.push_updates()
            except Exception:
                log.exception("cloud cycle failed")

    def start(self) -> "CloudNode":
        self._stop.clear()
        self._thread = threading.Thread(target=self._loop, name="cloud-cycle", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)


class MedicalSiteStub:
    """Remote medical site stand-in: logs each notification and ACKs."""

    def __init__(self, log_path=None):
        self.log_path = log_path
        self.entries: list = []
        self._lock = threading.Lock()

    def handle_frame(self, frame: Frame, record=None, peer=None) -> Frame:
        if frame.message_type != MessageType.MEDICAL_NOTIFY:
            return error(frame.request_id, Status.BAD_REQUEST, "expected MEDICAL_NOTIFY")
        try:
            report = parse(frame).report
        except MalformedPayload as exc:
            return error(frame.request_id, Status.BAD_REQUEST, str(exc))
        line = f"sample_id={report.sample_id} overall_score={report.overall_score:.2f}"
        with self._lock:
            self.entries.append(line)
            if self.log_path:
                with open(self.log_path, "a") as fh:
                    fh.write(line + "\n")
        log.info("medical notification %s", line)
        return ack(frame, Status.OK)


def serve(node, address: str, **kwargs) -> FrameServer:
    """Start a frame server in front of a node's ``handle_frame``."""
    on_error = getattr(node, "on_stream_error", None)
    return FrameServer(address, node.handle_frame, on_error=on_error, **kwargs).start()
