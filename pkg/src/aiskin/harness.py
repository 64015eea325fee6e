"""Experiment orchestration: terminal submissions, delay trials, resolution
comparison, and the closed-loop label-efficiency experiment."""

from __future__ import annotations

import csv
import logging
import math
import secrets
import statistics
import tempfile
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .cloud import CloudConfig, CloudNode
from .core import (
    DISEASE_TYPES,
    AnalysisReport,
    DiagnosisLabel,
    DiseaseType,
    ImageSample,
    shannon_entropy_bits,
)
from .dataset import (
    OVERLAY_FOR,
    GeneratorConfig,
    OverlayParams,
    generate,
    generate_face,
    generate_scenes,
    render_sample,
    split,
    to_arrays,
)
from .edge import DelayRecord, EdgeConfig, EdgeNode, Snapshot
from .errors import AiSkinError, ContractError
from .filter import FilterConfig, SelectionBatch, SelectionEntry, classify_skin_color
from .links import LocalLink
from .neuralnet import TINY_LENET, ModelConfig, accuracy, build_model
from .protocol import (
    Connection,
    DataUpload,
    ErrorMessage,
    ImageSubmit,
    MessageType,
    parse,
    to_frame,
)
from .registry import AlgorithmRegistry
from .training import fit, pretrain_to_band

log = logging.getLogger(__name__)

SCENARIOS = ("delay_trials", "resolution_compare", "closed_loop")
DELAY_COLUMNS = ("trial", "computation_s", "transmission_s", "total_s")
RESOLUTION_COLUMNS = ("disease", "resolution", "mean_computation_s", "agreement")
CLOSED_LOOP_COLUMNS = ("seed", "arm", "round", "accuracy", "selected", "baseline_accuracy")
ARMS = ("filtered", "random", "no_loop")


class HarnessError(AiSkinError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str
    trials: int = 30
    bandwidth_bps: float = 2_000_000.0
    model: str = "TinyLeNet"
    resolutions: tuple = (32, 128)
    seeds: tuple = (0, 1, 2, 3, 4)
    rounds: int = 3
    disease: DiseaseType = DiseaseType.ACNES
    threshold_bits: float = 0.3
    image_side: int = 40
    scenes: int = 50
    labeled_per_class: int = 150
    stream_per_round: int = 256

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractError(f"unknown scenario {self.scenario!r}")
        if self.trials < 1:
            raise ContractError("trials must be at least 1")
        if self.rounds < 1 or not self.seeds:
            raise ContractError("need at least one round and one seed")


# -- statistics ------------------------------------------------------------------


@dataclass(frozen=True)
class TrialStats:
    n: int
    mean_computation_s: float
    mean_transmission_s: float
    mean_total_s: float
    stddev_total_s: Optional[float]
    rows: tuple = ()

    @classmethod
    def from_records(cls, records: Sequence[DelayRecord]) -> "TrialStats":
        if not records:
            raise HarnessError("no delay records to summarize")
        totals = [r.total_s for r in records]
        return cls(
            n=len(records),
            mean_computation_s=statistics.fmean(r.computation_s for r in records),
            mean_transmission_s=statistics.fmean(r.transmission_s for r in records),
            mean_total_s=statistics.fmean(totals),
            # sample standard deviation (n - 1); undefined for a single trial
            stddev_total_s=statistics.stdev(totals) if len(totals) >= 2 else None,
            rows=tuple(records),
        )

    def summary(self) -> str:
        sd = "n/a" if self.stddev_total_s is None else f"{self.stddev_total_s * 1e3:.3f} ms"
        return (f"trials={self.n}  computation={self.mean_computation_s * 1e3:.3f} ms  "
                f"transmission={self.mean_transmission_s * 1e3:.3f} ms  "
                f"total={self.mean_total_s * 1e3:.3f} ms  stddev(total)={sd}")


def write_csv(path, columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
    return path


def write_delay_csv(path, stats: TrialStats) -> Path:
    rows = [(i, repr(r.computation_s), repr(r.transmission_s), repr(r.total_s))
            for i, r in enumerate(stats.rows, 1)]
    return write_csv(path, DELAY_COLUMNS, rows)


def read_delay_csv(path) -> list:
    with open(path, newline="") as fh:
        return [DelayRecord(int(row["trial"]), float(row["computation_s"]),
                            float(row["transmission_s"]), float(row["total_s"]))
                for row in csv.DictReader(fh)]


# -- terminal client -------------------------------------------------------------


def submit(address: str, sample: ImageSample, request_id: Optional[int] = None,
           timeout: float = 30.0, bandwidth_bps: Optional[float] = None) -> tuple:
    """Send one image; returns (report or ErrorMessage, round-trip seconds)."""
    request_id = secrets.randbits(48) if request_id is None else request_id
    frame = to_frame(ImageSubmit(sample), request_id)
    start = time.perf_counter()
    with Connection.connect(address, timeout) as conn:
        reply = conn.request(frame, bandwidth_bps)
    rtt = time.perf_counter() - start
    body = parse(reply)
    if reply.message_type == MessageType.REPORT:
        return body.report, rtt
    return body, rtt


def format_report(report: AnalysisReport) -> str:
    lines = [f"sample {report.sample_id}  skin color: {report.skin_color.name.lower()}  "
             f"model version: {report.model_version}"]
    for v in report.verdicts:
        mark = "positive" if v.positive else "negative"
        lines.append(f"  {v.disease_type.slug:<13} {mark:<9} p={v.p_positive:.3f}  v{v.model_version}")
    lines.append(f"  overall score: {report.overall_score:.1f}")
    return "\n".join(lines)


# -- delay trials ----------------------------------------------------------------

DelaySource = Callable[[int], Optional[DelayRecord]]


def node_delay_source(edge: EdgeNode) -> DelaySource:
    def fetch(request_id: int) -> Optional[DelayRecord]:
        found = [r for r in edge.delay_records() if r.request_id == request_id]
        return found[-1] if found else None
    return fetch


def http_delay_source(base_url: str, timeout: float = 10.0) -> DelaySource:
    import httpx

    def fetch(request_id: int) -> Optional[DelayRecord]:
        resp = httpx.get(f"{base_url.rstrip('/')}/metrics/delays",
                         params={"request_id": request_id}, timeout=timeout)
        resp.raise_for_status()
        rows = resp.json()
        if not rows:
            return None
        r = rows[-1]
        return DelayRecord(r["request_id"], r["computation_s"], r["transmission_s"], r["total_s"])
    return fetch


def csv_delay_source(path) -> DelaySource:
    def fetch(request_id: int) -> Optional[DelayRecord]:
        with open(path, newline="") as fh:
            found = [row for row in csv.DictReader(fh) if int(row["request_id"]) == request_id]
        if not found:
            return None
        r = found[-1]
        return DelayRecord(request_id, float(r["computation_s"]), float(r["transmission_s"]),
                           float(r["total_s"]))
    return fetch


@dataclass
class DelayTrialRun:
    stats: TrialStats
    round_trip_s: list = field(default_factory=list)
    payload_bytes: int = 0


def run_delay_trials(spec: ExperimentSpec, edge_address: str, delays: DelaySource,
                     seed: int = 0, retries: int = 20) -> DelayTrialRun:
    """Submit ``spec.trials`` images one after another and collect the edge's delay records."""
    gen = GeneratorConfig(seed=seed, width=spec.image_side, height=spec.image_side)
    base = secrets.randbits(40) << 16
    records, rtts, payload = [], [], 0
    for trial in range(1, spec.trials + 1):
        sample = render_sample(generate_face(gen, (), trial, "delay"), spec.image_side,
                               spec.image_side, gen.noise_sigma)
        payload = len(ImageSubmit(sample).to_payload())
        body, rtt = submit(edge_address, sample, base + trial)
        if isinstance(body, ErrorMessage):
            raise HarnessError(f"trial {trial}: edge answered {body.status} {body.message}")
        rtts.append(rtt)
        record = None
        for _ in range(retries):
            record = delays(base + trial)
            if record is not None:
                break
            time.sleep(0.05)
        if record is None:
            raise HarnessError(f"no delay record for trial {trial}; is the edge metrics channel on?")
        records.append(DelayRecord(trial, record.computation_s, record.transmission_s,
                                   record.total_s))
    return DelayTrialRun(TrialStats.from_records(records), rtts, payload)


# -- resolution comparison -------------------------------------------------------


@dataclass(frozen=True)
class ResolutionRow:
    disease: DiseaseType
    resolution: int
    mean_computation_s: float
    agreement: float


def compare_resolutions(snapshot: Snapshot, low: Sequence[ImageSample],
                        high: Sequence[ImageSample]) -> tuple:
    """Per-resolution mean single-image compute time and verdict agreement."""
    if not low or len(low) != len(high):
        raise ContractError("resolution comparison needs equally many paired scenes (at least one)")
    for a, b in zip(low, high):
        if a.sample_id != b.sample_id:
            raise ContractError(f"unpaired scenes {a.sample_id} / {b.sample_id}")
    times, verdicts = [], []
    for samples in (low, high):
        elapsed, positives = [], []
        for s in samples:
            start = time.perf_counter()
            p = snapshot.predict([s])[0, 1]
            elapsed.append(time.perf_counter() - start)
            positives.append(p >= 0.5)
        times.append(statistics.fmean(elapsed))
        verdicts.append(np.array(positives))
    agreement = float(np.mean(verdicts[0] == verdicts[1]))
    return times[0], times[1], agreement


def run_resolution_compare(spec: ExperimentSpec, snapshots: dict, seed: int = 0,
                           diseases: Sequence[DiseaseType] = (DiseaseType.BLACKHEADS,
                                                              DiseaseType.SPOTS)) -> list:
    if spec.scenes < 1:
        raise ContractError("need at least one scene")
    low_res, high_res = spec.resolutions
    rows = []
    for disease in diseases:
        gen = GeneratorConfig(seed=seed, samples_per_class=math.ceil(spec.scenes / 2))
        scenes = generate_scenes(gen, disease, "resolution")[:spec.scenes]
        low = [render_sample(s, low_res, low_res, gen.noise_sigma) for s in scenes]
        high = [render_sample(s, high_res, high_res, gen.noise_sigma) for s in scenes]
        t_low, t_high, agreement = compare_resolutions(snapshots[disease], low, high)
        rows.append(ResolutionRow(disease, low_res, t_low, agreement))
        rows.append(ResolutionRow(disease, high_res, t_high, agreement))
    return rows


def resolution_csv_rows(rows: Sequence[ResolutionRow]) -> list:
    return [(r.disease.slug, r.resolution, repr(r.mean_computation_s), repr(r.agreement))
            for r in rows]


# -- closed loop -----------------------------------------------------------------


@dataclass(frozen=True)
class LoopRow:
    seed: int
    arm: str
    round: int
    accuracy: float
    selected: int
    baseline_accuracy: float

    def as_csv(self) -> tuple:
        return (self.seed, self.arm, self.round, repr(self.accuracy), self.selected,
                repr(self.baseline_accuracy))


@dataclass(frozen=True)
class LoopSummary:
    median_baseline: float
    median_filtered: float
    median_random: float
    non_degradation: bool
    filtered_vs_random: bool


def _random_uploads(edge: EdgeNode, disease: DiseaseType, stream: Sequence[ImageSample],
                    budget: int, rng: np.random.Generator, round_id: int) -> list:
    """Budget-matched random selection, pseudo-labeled by the current snapshot."""
    if budget == 0:
        return []
    snap = edge.snapshots[disease]
    chosen = [stream[i] for i in sorted(rng.choice(len(stream), size=budget, replace=False))]
    probs = snap.predict(chosen)
    by_color: dict = {}
    for s, p in zip(chosen, probs):
        color = classify_skin_color(s)
        label = DiagnosisLabel(disease, bool(np.argmax(p) == 1))
        entry = SelectionEntry(ImageSample(s.pixels, s.width, s.height, s.sample_id, color),
                               label, shannon_entropy_bits(p))
        by_color.setdefault(color, []).append(entry)
    return [SelectionBatch(round_id, color, tuple(entries), snap.version)
            for color, entries in sorted(by_color.items())]


def _loop_arm(arm: str, seed: int, spec: ExperimentSpec, config: ModelConfig, baseline,
              labeled: list, streams: list, x_test, y_test, workdir: Path,
              budgets: list) -> list:
    disease = spec.disease
    edges: dict = {}
    cloud = CloudNode(CloudConfig(storage_dir=str(workdir / f"seed{seed}-{arm}"), seed=seed,
                                  algorithm=config.name, link_factory=lambda a: edges[a]))
    cloud.set_labeled(disease, labeled)
    cloud.publish(disease, baseline.copy())
    cloud_link = LocalLink(cloud.handle_frame, "cloud")
    edge = EdgeNode(EdgeConfig(filter=FilterConfig(spec.threshold_bits), bandwidth_bps=None),
                    registry=cloud.registry,
                    snapshots={disease: Snapshot(disease, baseline.copy())},
                    cloud_link=cloud_link)
    edges["edge"] = LocalLink(edge.handle_frame, "edge")
    cloud.edges.register("edge", edge.versions())
    rng = np.random.default_rng([seed, 7919])
    rows = []
    for r, stream in enumerate(streams, 1):
        if arm == "filtered":
            edge.add_unlabeled(stream)
            selected = edge.run_filter_round().uploaded_samples
            budgets.append(selected)
        else:
            batches = _random_uploads(edge, disease, stream, budgets[r - 1], rng, r)
            for batch in batches:
                cloud_link.exchange(to_frame(DataUpload(batch), r))
            selected = sum(len(b.entries) for b in batches)
        cloud.retrain_round(disease)
        cloud.push_updates(ignore_backoff=True)
        acc = accuracy(edge.snapshots[disease].model, x_test, y_test)
        rows.append((r, acc, selected))
    return rows


def run_closed_loop(spec: ExperimentSpec, workdir=None,
                    progress: Optional[Callable[[str], None]] = None) -> list:
    """Three arms per seed: entropy-filtered loop, budget-matched random loop, no loop."""
    config = AlgorithmRegistry().get(spec.model).config
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="aiskin-loop-")
        workdir = tmp.name
    workdir = Path(workdir)
    rows = []
    try:
        for seed in spec.seeds:
            disease = spec.disease
            labeled = shifted_population(seed, disease, spec.labeled_per_class, "labeled",
                                         subtle_fraction=0.0)
            validation = shifted_population(seed, disease, 100, "validation")
            test = shifted_population(seed, disease, 200, "test")
            x_test, y_test = to_arrays(test, config.input_height, config.input_width)
            band = pretrain_to_band(config, labeled, validation, seed=seed)
            if not band.in_band:
                log.warning("seed %d: baseline validation accuracy %.3f is outside the band",
                            seed, band.validation_accuracy)
            base_acc = accuracy(band.model, x_test, y_test)
            streams = [
                [s.unlabeled() for s in
                 shifted_population(seed, disease, spec.stream_per_round // 2, f"stream-{r}")]
                for r in range(1, spec.rounds + 1)
            ]
            budgets: list = []
            for arm in ("filtered", "random"):
                for r, acc, selected in _loop_arm(arm, seed, spec, config, band.model, labeled,
                                                  streams, x_test, y_test, workdir, budgets):
                    rows.append(LoopRow(seed, arm, r, acc, selected, base_acc))
            for r in range(1, spec.rounds + 1):
                rows.append(LoopRow(seed, "no_loop", r, base_acc, 0, base_acc))
            if progress:
                final = {row.arm: row.accuracy for row in rows if row.seed == seed
                         and row.round == spec.rounds}
                progress(f"seed {seed}: baseline {base_acc:.3f}  filtered {final['filtered']:.3f}  "
                         f"random {final['random']:.3f}")
    finally:
        if tmp is not None:
            tmp.cleanup()
    return rows


def prominent_and_subtle(params: OverlayParams) -> tuple:
    """Split an overlay range into a prominent upper part and a faint lower variant."""
    (lo, hi), (rlo, rhi) = params.count, params.radius
    prominent = OverlayParams(((lo + hi + 1) // 2, hi), ((rlo + rhi) / 2, rhi))
    subtle = OverlayParams((1, max(1, lo)), (0.35 * rlo, rlo))
    return prominent, subtle


def shifted_population(seed: int, disease: DiseaseType, per_class: int, tag: str,
                       subtle_fraction: float = 0.5) -> list:
    """Samples whose positives are partly faint versions of the condition.

    The closed-loop baseline learns from prominent cases only and is then scored
    on this mixture, which puts a fitted model's accuracy in the 0.75-0.85 range.
    """
    kind = OVERLAY_FOR[DiseaseType(disease)]
    prominent, subtle = prominent_and_subtle(getattr(GeneratorConfig(), kind))
    n_subtle = int(round(per_class * subtle_fraction))
    out = []
    for part, params, n in (("p", prominent, per_class - n_subtle), ("s", subtle, n_subtle)):
        if n:
            gen = GeneratorConfig(seed=seed, samples_per_class=n, **{kind: params})
            out += generate(gen, disease, f"{tag}-{part}")
    order = np.random.default_rng([seed, zlib.crc32(tag.encode())]).permutation(len(out))
    return [out[i] for i in order]


def summarize_closed_loop(rows: Sequence[LoopRow], tolerance: float = 0.02) -> LoopSummary:
    last = max(r.round for r in rows)
    final = {arm: [r.accuracy for r in rows if r.arm == arm and r.round == last] for arm in ARMS}
    base = statistics.median(final["no_loop"])
    filt = statistics.median(final["filtered"])
    rand = statistics.median(final["random"])
    return LoopSummary(base, filt, rand, filt >= base - tolerance, filt >= rand - tolerance)


def train_models(config: ModelConfig = TINY_LENET, samples_per_class: int = 600, epochs: int = 10,
                 seed: int = 0, diseases: Sequence[DiseaseType] = DISEASE_TYPES) -> dict:
    """One trained snapshot per disease on synthetic data (85/15 split); returns
    {disease: (snapshot, test accuracy)}."""
    out = {}
    for disease in diseases:
        samples = generate(GeneratorConfig(seed=seed, samples_per_class=samples_per_class), disease)
        parts = split(samples, 0.85, seed)
        x, y = to_arrays(parts.train, config.input_height, config.input_width)
        xt, yt = to_arrays(parts.test, config.input_height, config.input_width)
        model = build_model(config, seed)
        fit(model, x, y, epochs, seed)
        model.version = 1
        out[disease] = (Snapshot(disease, model), accuracy(model, xt, yt))
    return out
