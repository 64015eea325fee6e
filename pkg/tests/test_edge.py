import socket
import threading

import numpy as np
import pytest

from aiskin.cloud import serve
from aiskin.core import DISEASE_TYPES, DiseaseType, ImageSample, SkinColorClass
from aiskin.dataset import GeneratorConfig, generate_face, render_sample
from aiskin.edge import DelayRecord, EdgeConfig, EdgeNode, Snapshot, load_snapshots
from aiskin.filter import FilterConfig
from aiskin.harness import submit
from aiskin.neuralnet import TINY_ALEXNET, TINY_LENET, build_model
from aiskin.protocol import (
    Connection,
    DataUpload,
    Frame,
    ImageSubmit,
    MessageType,
    ModelUpdate,
    Status,
    ack,
    encode,
    error,
    parse,
    to_frame,
)


class TableSnapshot:
    """Stand-in snapshot with fixed outputs per sample_id."""

    def __init__(self, disease, table, version=1):
        self.disease_type = disease
        self.table = table
        self.version = version

    def predict(self, samples):
        return np.array([self.table[s.sample_id] for s in samples])

    def verify(self):
        return True


class RecordingLink:
    def __init__(self, fail=False):
        self.frames = []
        self.fail = fail

    def exchange(self, frame):
        if self.fail:
            raise ConnectionRefusedError("cloud down")
        self.frames.append(frame)
        return ack(frame, Status.OK)


def flat(sample_id, value=180):
    return ImageSample(bytes([value] * 16 * 16 * 3), 16, 16, sample_id, SkinColorClass.LIGHT)


def model_with_version(version, seed=0, config=TINY_LENET):
    m = build_model(config, seed)
    m.version = version
    return m


def update_frame(disease, version, seed=0, config=TINY_LENET, request_id=1):
    bundle = Snapshot(disease, model_with_version(version, seed, config)).bundle()
    return to_frame(ModelUpdate(disease, bundle), request_id)


def face(conditions=(), index=0, side=32):
    cfg = GeneratorConfig(seed=11)
    return render_sample(generate_face(cfg, conditions, index), side, side, cfg.noise_sigma)


class TestSnapshot:
    def test_frozen_and_verified(self):
        snap = Snapshot(DiseaseType.ACNES, model_with_version(2))
        assert snap.verify() and snap.version == 2
        with pytest.raises(ValueError):
            snap.model.params[0][0][0, 0, 0, 0] = 1.0

    def test_bundle_roundtrip(self):
        from aiskin.registry import AlgorithmRegistry

        snap = Snapshot(DiseaseType.SPOTS, model_with_version(4, config=TINY_ALEXNET))
        back = Snapshot.from_bundle(DiseaseType.SPOTS, snap.bundle(), AlgorithmRegistry())
        assert back.checksum == snap.checksum and back.model.config.name == "TinyAlexNet"

    def test_load_snapshots(self, tmp_path, untrained_snapshots):
        from aiskin.registry import AlgorithmRegistry

        for d, s in untrained_snapshots.items():
            (tmp_path / f"{d.slug}.aisk").write_bytes(s.bundle())
        loaded = load_snapshots(tmp_path, AlgorithmRegistry())
        assert set(loaded) == set(DISEASE_TYPES)


class TestImageSubmit:
    def test_report_for_every_type(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        reply = edge.handle_frame(to_frame(ImageSubmit(face()), 31))
        assert reply.message_type == MessageType.REPORT and reply.request_id == 31
        report = parse(reply).report
        assert [v.disease_type for v in report.verdicts] == list(DISEASE_TYPES)
        assert edge.pool_size() == 1

    def test_minimum_size_image(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        reply = edge.handle_frame(to_frame(ImageSubmit(face(side=8)), 1))
        assert reply.message_type == MessageType.REPORT

    def test_missing_model_is_retryable(self, untrained_snapshots):
        del untrained_snapshots[DiseaseType.SPOTS]
        edge = EdgeNode(snapshots=untrained_snapshots)
        body = parse(edge.handle_frame(to_frame(ImageSubmit(face()), 1)))
        assert Status(body.status) is Status.UNAVAILABLE and Status(body.status).retryable
        assert edge.pool_size() == 0

    def test_malformed_image(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        reply = edge.handle_frame(Frame(MessageType.IMAGE_SUBMIT, 5, b"\x00" * 7))
        assert reply.message_type == MessageType.ERROR and reply.request_id == 5
        assert edge.pool_size() == 0

    def test_unexpected_type(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        reply = edge.handle_frame(Frame(MessageType.DATA_UPLOAD, 6, b""))
        assert parse(reply).status == Status.BAD_REQUEST

    def test_skin_color_reclassified(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        sample = ImageSample(bytes([80, 60, 50] * 32 * 32), 32, 32, 1, SkinColorClass.LIGHT)
        report = parse(edge.handle_frame(to_frame(ImageSubmit(sample), 1))).report
        assert report.skin_color is SkinColorClass.DARK

    def test_delay_accounting(self, tmp_path, untrained_snapshots):
        path = tmp_path / "delays.csv"
        edge = EdgeNode(EdgeConfig(metrics_path=str(path)), snapshots=untrained_snapshots)
        for rid in (10, 11):
            edge.handle_frame(to_frame(ImageSubmit(face()), rid))
        recs = edge.delay_records()
        assert [r.request_id for r in recs] == [10, 11]
        for r in recs:
            assert abs(r.total_s - (r.computation_s + r.transmission_s)) < 1e-3
        lines = path.read_text().splitlines()
        assert lines[0] == "request_id,computation_s,transmission_s,total_s"
        assert len(lines) == 3
        assert edge.delay_records(since=1) == recs[1:]

    def test_corrupted_submission_over_tcp(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        server = serve(edge, "127.0.0.1:0")
        try:
            blob = bytearray(encode(to_frame(ImageSubmit(face()), 77)))
            blob[40] ^= 0xFF
            host, port = server.server_address[:2]
            with socket.create_connection((host, port), timeout=5) as s:
                s.sendall(bytes(blob))
                reply, _ = Connection(s).recv()
            assert reply.message_type == MessageType.ERROR and reply.request_id == 77
            assert edge.pool_size() == 0
            body, _ = submit(server.address, face(), request_id=78)
            assert body.sample_id == face().sample_id
            assert edge.pool_size() == 1
        finally:
            server.stop()

    def test_notify_failure_does_not_block_report(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots, cloud_link=RecordingLink(fail=True)).start()
        try:
            for rid in range(3):
                assert edge.handle_frame(to_frame(ImageSubmit(face()), rid)).message_type == MessageType.REPORT
        finally:
            edge.stop()

    def test_clean_face_with_trained_models(self, trained_snapshots):
        edge = EdgeNode(snapshots=trained_snapshots)
        scores = []
        for index in range(5):
            report = parse(edge.handle_frame(to_frame(ImageSubmit(face((), index)), index))).report
            assert report.verdict(DiseaseType.CLEAN_FACE).positive
            scores.append(report.overall_score)
        assert min(scores) >= 80

    def test_acne_face_with_trained_models(self, trained_snapshots):
        edge = EdgeNode(snapshots=trained_snapshots)
        report = parse(edge.handle_frame(to_frame(ImageSubmit(face((DiseaseType.ACNES,), 2)), 1))).report
        assert report.verdict(DiseaseType.ACNES).positive
        assert not report.verdict(DiseaseType.CLEAN_FACE).positive


class TestFilterRound:
    def pool_edge(self, table, link=None, threshold=0.3, **kwargs):
        snap = TableSnapshot(DiseaseType.ACNES, table)
        edge = EdgeNode(EdgeConfig(filter=FilterConfig(threshold), **kwargs),
                        snapshots={DiseaseType.ACNES: snap}, cloud_link=link)
        edge.add_unlabeled([flat(i) for i in table])
        return edge

    def test_three_of_ten_uploaded(self):
        table = {i: [0.5, 0.5] for i in range(10)}
        for i in (2, 5, 7):
            table[i] = [0.995, 0.005]
        link = RecordingLink()
        edge = self.pool_edge(table, link)
        result = edge.run_filter_round()
        uploaded = [e.sample.sample_id for f in link.frames for e in parse(f).batch.entries]
        assert sorted(uploaded) == [2, 5, 7]
        assert len(link.frames) == 1 and result.delivered == 1
        assert edge.pool_size() == 0
        assert result.uploaded_bytes < result.pooled_bytes

    def test_empty_pool(self):
        link = RecordingLink()
        edge = self.pool_edge({}, link)
        result = edge.run_filter_round()
        assert result.frames == [] and link.frames == []

    def test_uniform_pool_cleared(self):
        link = RecordingLink()
        edge = self.pool_edge({i: [0.5, 0.5] for i in range(6)}, link)
        result = edge.run_filter_round()
        assert result.uploaded_samples == 0 and link.frames == []
        assert edge.pool_size() == 0

    def test_zero_threshold_uploads_nothing(self):
        link = RecordingLink()
        edge = self.pool_edge({i: [1.0, 0.0] for i in range(6)}, link, threshold=0.0)
        assert edge.run_filter_round().uploaded_samples == 0

    def test_one_frame_per_color(self):
        link = RecordingLink()
        snap = TableSnapshot(DiseaseType.ACNES, {0: [0, 1], 1: [0, 1]})
        edge = EdgeNode(snapshots={DiseaseType.ACNES: snap}, cloud_link=link)
        edge.add_unlabeled([flat(0, 230), flat(1, 60)])
        edge.run_filter_round()
        colors = sorted(parse(f).batch.skin_color for f in link.frames)
        assert colors == [SkinColorClass.LIGHT, SkinColorClass.DARK]

    def test_spool_and_retry(self, tmp_path):
        link = RecordingLink(fail=True)
        edge = self.pool_edge({0: [0, 1], 1: [1, 0]}, link, spool_dir=str(tmp_path / "spool"))
        result = edge.run_filter_round()
        assert result.spooled == 1 and edge.spooled() == 1
        assert edge.retry_spool(now=0.0) == 0
        assert edge.backoff_delay() == 1.0
        assert edge.retry_spool(now=0.5) == 0  # still backing off
        link.fail = False
        assert edge.retry_spool(now=1.0) == 1
        assert edge.spooled() == 0
        assert parse(link.frames[0]).batch.entries[0].sample.sample_id in (0, 1)

    def test_memory_spool_without_dir(self):
        edge = self.pool_edge({0: [0, 1]}, RecordingLink(fail=True))
        edge.run_filter_round()
        assert edge.spooled() == 1

    def test_backoff_caps_at_60s(self):
        edge = self.pool_edge({0: [0, 1]}, RecordingLink(fail=True))
        edge.run_filter_round()
        delays = []
        now = 0.0
        for _ in range(10):
            edge.retry_spool(now)
            delays.append(edge.backoff_delay())
            now += 1000
        assert delays[:7] == [1, 2, 4, 8, 16, 32, 60]
        assert max(delays) == 60

    def test_retryable_cloud_error_spools(self):
        class Busy(RecordingLink):
            def exchange(self, frame):
                return error(frame.request_id, Status.STORAGE_RETRY, "disk full")

        edge = self.pool_edge({0: [0, 1]}, Busy())
        assert edge.run_filter_round().spooled == 1

    def test_pool_capacity_evicts_oldest(self):
        edge = EdgeNode(EdgeConfig(pool_capacity=3))
        edge.add_unlabeled([flat(i) for i in range(5)])
        assert edge.pool_size() == 3
        assert edge.metrics.get("pool_evictions") == 2

    def test_upload_is_well_formed(self):
        link = RecordingLink()
        edge = self.pool_edge({0: [0.001, 0.999]}, link)
        edge.run_filter_round()
        batch = parse(link.frames[0]).batch
        assert isinstance(parse(link.frames[0]), DataUpload)
        assert batch.entries[0].pseudo_label.positive
        assert batch.entries[0].sample.truth_label is None


class TestModelUpdate:
    def edge(self, version=3):
        return EdgeNode(snapshots={DiseaseType.ACNES: Snapshot(DiseaseType.ACNES, model_with_version(version))})

    def test_newer_applied(self):
        edge = self.edge(3)
        body = parse(edge.handle_frame(update_frame(DiseaseType.ACNES, 5)))
        assert Status(body.status) is Status.ACCEPTED and body.detail["version"] == 5
        assert edge.versions()[DiseaseType.ACNES] == 5

    def test_stale_ignored(self):
        edge = self.edge(5)
        body = parse(edge.handle_frame(update_frame(DiseaseType.ACNES, 2)))
        assert Status(body.status) is Status.IGNORED and body.detail["version"] == 5
        assert edge.versions()[DiseaseType.ACNES] == 5

    def test_corrupted_rejected(self):
        edge = self.edge(3)
        frame = update_frame(DiseaseType.ACNES, 9)
        payload = bytearray(frame.payload)
        payload[100] ^= 0x55
        reply = edge.handle_frame(Frame(frame.message_type, 1, bytes(payload)))
        assert parse(reply).status == Status.UNPROCESSABLE
        assert edge.versions()[DiseaseType.ACNES] == 3

    def test_architecture_change_rejected(self):
        edge = self.edge(3)
        reply = edge.handle_frame(update_frame(DiseaseType.ACNES, 9, config=TINY_ALEXNET))
        assert parse(reply).status == Status.CONFLICT

    def test_first_model_for_a_type(self):
        edge = self.edge(3)
        edge.handle_frame(update_frame(DiseaseType.SPOTS, 1))
        assert edge.versions()[DiseaseType.SPOTS] == 1

    def test_inflight_inference_keeps_old_snapshot(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        held = edge.snapshots
        edge.handle_frame(update_frame(DiseaseType.ACNES, 7))
        assert held[DiseaseType.ACNES].version == 1
        assert edge.snapshots[DiseaseType.ACNES].version == 7

    def test_concurrent_updates_monotone(self, untrained_snapshots):
        edge = EdgeNode(snapshots=untrained_snapshots)
        frames = [update_frame(DiseaseType.ACNES, v, seed=v) for v in np.random.default_rng(0).permutation(range(2, 30))]
        seen = []
        stop = threading.Event()

        def infer():
            while not stop.is_set():
                reply = edge.handle_frame(to_frame(ImageSubmit(face()), 1))
                seen.append(parse(reply).report.verdict(DiseaseType.ACNES).model_version)

        reader = threading.Thread(target=infer)
        reader.start()
        for f in frames:
            edge.handle_frame(f)
        stop.set()
        reader.join()
        assert seen == sorted(seen)
        versions = [v for d, v in edge.version_log if d is DiseaseType.ACNES]
        assert versions == sorted(versions) and versions[-1] == 29


def test_pull_models_announces_versions(untrained_snapshots):
    link = RecordingLink()
    edge = EdgeNode(EdgeConfig(listen_address="127.0.0.1:7001"), snapshots=untrained_snapshots,
                    cloud_link=link)
    edge.pull_models()
    pull = parse(link.frames[0])
    assert pull.edge_address == "127.0.0.1:7001"
    assert dict(pull.versions) == {d: 1 for d in DISEASE_TYPES}


def test_delay_record_total():
    assert DelayRecord.of(1, 0.25, 0.5).total_s == 0.75
