"""One test per acceptance criterion, each run at its stated tolerance and time limit.

Every test prints a PASS/FAIL line; the lines are repeated in the session summary.
"""

import struct
import sys
import threading
import time
import zlib

import numpy as np
import pytest
from criteria_log import criterion
from oracles import (
    brute_force_mean,
    brute_force_stddev,
    entropy_bits_hp,
    ideal_delay_exact,
)
from test_protocol import rand_message

from aiskin.cloud import serve
from aiskin.core import (
    DISEASE_TYPES,
    DiseaseType,
    ImageSample,
    SkinColorClass,
    shannon_entropy_bits,
)
from aiskin.dataset import (
    GeneratorConfig,
    decode_dataset,
    encode_dataset,
    generate,
    split,
    to_arrays,
)
from aiskin.edge import DelayRecord, EdgeConfig, EdgeNode, Snapshot
from aiskin.filter import FilterConfig, score_and_filter
from aiskin.harness import (
    ExperimentSpec,
    TrialStats,
    node_delay_source,
    run_closed_loop,
    run_delay_trials,
    run_resolution_compare,
    summarize_closed_loop,
)
from aiskin.neuralnet import (
    ALEXNET,
    LENET5,
    TINY_LENET,
    VGG16,
    Model,
    accuracy,
    build_model,
    deserialize_parameters,
    gradient_check_report,
    one_hot,
    serialize_parameters,
)
from aiskin.protocol import (
    OVERHEAD,
    Connection,
    Frame,
    FrameDecoder,
    FrameError,
    FrameServer,
    ImageSubmit,
    MessageType,
    ModelUpdate,
    Status,
    ack,
    decode,
    encode,
    parse,
    to_frame,
)
from aiskin.training import fit

pytestmark = pytest.mark.slow

BANDWIDTH = 2_000_000


# -- 1 -------------------------------------------------------------------------


def test_c1_entropy_oracle():
    with criterion(1, "entropy matches 50-digit oracle on the 0.01 grid", 1.0):
        grid = [k / 100 for k in range(101)]
        for p in grid:
            h = shannon_entropy_bits([p, 1 - p])
            assert abs(h - entropy_bits_hp([p, 1 - p])) < 1e-9, p
            assert 0.0 <= h <= 1.0
            assert h == shannon_entropy_bits([1 - p, p])
            assert (h == 0.0) == (p in (0.0, 1.0))
            assert (h == 1.0) == (p == 0.5)


# -- 2 -------------------------------------------------------------------------


class _Table:
    def __init__(self, table):
        self.table, self.disease_type, self.version = table, DiseaseType.SPOTS, 1

    def predict(self, samples):
        return np.array([self.table[s.sample_id] for s in samples], dtype=np.float64)


def test_c2_filter_properties():
    with criterion(2, "filter properties over 1000 randomized sets", 10.0):
        rng = np.random.default_rng(20240601)
        for trial in range(1000):
            n = int(rng.integers(1, 50))
            samples = [ImageSample(bytes(192), 8, 8, i, SkinColorClass(int(rng.integers(3))))
                       for i in range(n)]
            q = rng.random(n)
            q[rng.random(n) < 0.1] = 1.0
            q[rng.random(n) < 0.1] = 0.0
            q[rng.random(n) < 0.05] = 0.5
            pred = _Table({i: [1 - v, v] for i, v in enumerate(q)})
            entropies = [shannon_entropy_bits([1 - v, v]) for v in q]
            # thresholds include exact entropies to exercise the strict comparison
            t1, t2 = sorted([float(rng.random()), entropies[int(rng.integers(n))]])
            _, d1 = score_and_filter(samples, pred, FilterConfig(t1, n))
            batches, d2 = score_and_filter(samples, pred, FilterConfig(t2, n))
            a1 = {d.sample_id for d in d1 if d.accepted}
            a2 = {d.sample_id for d in d2 if d.accepted}
            assert a1 <= a2
            assert a2 == {i for i, h in enumerate(entropies) if h < t2}
            for d in d2:
                if d.accepted:
                    assert d.pseudo_label.positive == (int(np.argmax([1 - q[d.sample_id], q[d.sample_id]])) == 1)
            assert sum(len(b) for b in batches.values()) == len(a2)
            none, d0 = score_and_filter(samples, pred, FilterConfig(0.0, n))
            assert none == {} and not any(d.accepted for d in d0)


# -- 3 -------------------------------------------------------------------------


def test_c3_gradient_check():
    with criterion(3, "backprop vs central differences on TinyLeNet", 60.0):
        model = build_model(TINY_LENET, 5)
        x = np.random.default_rng(5).normal(size=(2, 3, 32, 32))
        report = gradient_check_report(model, x, one_hot([0, 1]), n_weights=200, seed=5)
        print(report)
        assert report["Dense"]["checked"] >= 200
        assert report["Conv2D"]["checked"] >= 200
        assert report["Dense"]["max_relative_error"] < 1e-4
        assert report["Conv2D"]["max_relative_error"] < 1e-3


# -- 4 -------------------------------------------------------------------------


@pytest.mark.parametrize("disease", DISEASE_TYPES, ids=lambda d: d.slug)
def test_c4_learnability(disease):
    with criterion(4, f"TinyLeNet >= 0.90 on {disease.slug} in 5 epochs", 120.0):
        samples = generate(GeneratorConfig(seed=0, samples_per_class=600), disease)
        parts = split(samples, 0.85, 0)
        x, y = to_arrays(parts.train, 32, 32)
        xt, yt = to_arrays(parts.test, 32, 32)
        model = build_model(TINY_LENET, 0)
        fit(model, x, y, 5, 0)
        acc = accuracy(model, xt, yt)
        print(f"{disease.slug}: test accuracy {acc:.4f} on {len(yt)} held-out samples")
        assert acc >= 0.90


# -- 5 -------------------------------------------------------------------------


def test_c5_closed_loop(tmp_path):
    with criterion(5, "closed loop: filtered >= no-loop - 0.02 and >= random - 0.02", 900.0):
        spec = ExperimentSpec("closed_loop")
        assert (spec.seeds, spec.rounds, spec.threshold_bits) == ((0, 1, 2, 3, 4), 3, 0.3)
        rows = run_closed_loop(spec, tmp_path, progress=print)
        assert len(rows) == 5 * 3 * 3
        baselines = {r.seed: r.baseline_accuracy for r in rows}
        print("baselines", baselines)
        assert all(0.75 <= b <= 0.85 for b in baselines.values())
        summary = summarize_closed_loop(rows)
        print(summary)
        assert summary.non_degradation
        assert summary.filtered_vs_random


# -- 6 -------------------------------------------------------------------------


def _ingress_trials(total_bytes, trials):
    seen = []

    def handler(frame, record, peer):
        seen.append(record)
        return ack(frame)

    server = FrameServer("127.0.0.1:0", handler, ingress_bandwidth_bps=BANDWIDTH).start()
    try:
        frame = Frame(MessageType.IMAGE_SUBMIT, 1, bytes(total_bytes - OVERHEAD))
        with Connection.connect(server.address, timeout=30) as conn:
            for _ in range(trials):
                conn.request(frame)
    finally:
        server.stop()
    return seen


def test_c6_transmission_delay():
    with criterion(6, "2 Mbps transmission within ideal x 1.05 + 50 ms; n-1 stddev", 300.0):
        for total, trials, ideal_ms in ((4830, 30, 19.32), (1_233_634, 5, 4934.536)):
            ideal = float(ideal_delay_exact(total, BANDWIDTH))
            assert ideal * 1e3 == pytest.approx(ideal_ms, abs=1e-9)
            records = _ingress_trials(total, trials)
            assert len(records) == trials
            for rec in records:
                assert rec.bytes_sent == total
                assert ideal <= rec.measured_delay_s <= ideal * 1.05 + 0.05, rec
            stats = TrialStats.from_records(
                [DelayRecord.of(i, 0.0, r.measured_delay_s) for i, r in enumerate(records)])
            print(f"{total} B: {stats.summary()}")

        edge = EdgeNode(EdgeConfig(bandwidth_bps=BANDWIDTH), snapshots={
            d: Snapshot(d, _versioned(build_model(TINY_LENET, int(d)), 1)) for d in DISEASE_TYPES})
        server = serve(edge, "127.0.0.1:0", ingress_bandwidth_bps=BANDWIDTH)
        try:
            run = run_delay_trials(ExperimentSpec("delay_trials", trials=30), server.address,
                                   node_delay_source(edge))
        finally:
            server.stop()
        frame_bytes = run.payload_bytes + OVERHEAD
        ideal = float(ideal_delay_exact(frame_bytes, BANDWIDTH))
        print(f"harness frame {frame_bytes} B, ideal {ideal * 1e3:.3f} ms: {run.stats.summary()}")
        assert 4700 <= frame_bytes <= 5000
        for r in run.stats.rows:
            assert ideal <= r.transmission_s <= ideal * 1.05 + 0.05
        totals = [r.total_s for r in run.stats.rows]
        assert run.stats.n == 30
        assert abs(run.stats.mean_total_s - brute_force_mean(totals)) <= 1e-12
        assert abs(run.stats.stddev_total_s - brute_force_stddev(totals)) <= 1e-12


def _versioned(model, version):
    model.version = version
    return model


# -- 7 -------------------------------------------------------------------------


def test_c7_protocol_robustness():
    with criterion(7, "1000 roundtrips, 10000 bit flips, 1-byte chunks", 30.0):
        rng = np.random.default_rng(77)
        frames = []
        for i in range(1000):
            msg = rand_message(rng, i % 8)
            frame = to_frame(msg, int(rng.integers(2**64, dtype=np.uint64)))
            assert decode(encode(frame)) == frame and parse(frame) == msg
            frames.append(frame)
        for _ in range(10_000):
            blob = bytearray(encode(frames[int(rng.integers(len(frames)))]))
            bit = int(rng.integers(len(blob) * 8))
            blob[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(FrameError):
                decode(bytes(blob))
        subset = frames[:64]
        stream = b"".join(encode(f) for f in subset)
        dec = FrameDecoder()
        out = []
        for i in range(len(stream)):
            out += dec.feed(stream[i:i + 1])
        assert out == subset and not dec.mid_frame


# -- 8 -------------------------------------------------------------------------


def test_c8_update_safety():
    with criterion(8, "1000 randomized update/inference interleavings", 60.0):
        disease = DiseaseType.ACNES
        top = 12
        models = {v: _versioned(build_model(TINY_LENET, 100 + v), v) for v in range(1, top + 1)}
        bundles = {v: serialize_parameters(m.to_parameters()) for v, m in models.items()}
        probe = ImageSample(np.random.default_rng(1).integers(0, 256, 32 * 32 * 3, dtype=np.uint8)
                            .tobytes(), 32, 32, 1, SkinColorClass.LIGHT)
        expected = {v: float(Snapshot(disease, m.copy()).predict([probe])[0, 1]) for v, m in models.items()}
        assert len(set(expected.values())) == top
        others = {d: Snapshot(d, _versioned(build_model(TINY_LENET, int(d)), 1))
                  for d in DISEASE_TYPES if d is not disease}
        submit = to_frame(ImageSubmit(probe), 1)
        rng = np.random.default_rng(8)
        old_interval = sys.getswitchinterval()
        sys.setswitchinterval(1e-5)
        try:
            for schedule in range(1000):
                edge = EdgeNode(EdgeConfig(bandwidth_bps=None), snapshots={
                    **others, disease: Snapshot(disease, models[1].copy())})
                order = [int(v) for v in rng.integers(1, top + 1, size=int(rng.integers(2, 6)))]
                corrupt = int(rng.integers(len(order) + 1))
                observed, statuses = [], []
                n_infer = int(rng.integers(1, 4))

                def infer():
                    for _ in range(n_infer):
                        body = parse(edge.handle_frame(submit))
                        observed.append(body.report.verdict(disease))

                reader = threading.Thread(target=infer)
                reader.start()
                for k, v in enumerate(order):
                    blob = bundles[v]
                    if k == corrupt:
                        blob = blob[:100] + bytes([blob[100] ^ 0x40]) + blob[101:]
                    reply = parse(edge.handle_frame(to_frame(ModelUpdate(disease, blob), k)))
                    statuses.append((v, k == corrupt, reply.status))
                    if rng.random() < 0.5:
                        time.sleep(0)
                reader.join()

                best = 1
                for v, was_corrupt, status in statuses:
                    if was_corrupt:
                        assert status == Status.UNPROCESSABLE
                    elif v > best:
                        assert status == Status.ACCEPTED
                        best = v
                    else:
                        assert status == Status.IGNORED
                versions = [v.model_version for v in observed]
                assert versions == sorted(versions)
                for verdict in observed:
                    # the probability must be the one this exact version produces
                    assert verdict.p_positive == expected[verdict.model_version]
                log = [v for d, v in edge.version_log if d is disease]
                assert log == sorted(set(log)) and edge.versions()[disease] == best
                assert edge.metrics.get("snapshot_checksum_failures") == 0
        finally:
            sys.setswitchinterval(old_interval)


# -- 9 -------------------------------------------------------------------------


def test_c9_resolution_agreement(trained_snapshots):
    with criterion(9, "verdict agreement 32 vs 128 px >= 0.9 (blackheads, spots)", 120.0):
        rows = run_resolution_compare(ExperimentSpec("resolution_compare"), trained_snapshots)
        for r in rows:
            print(f"{r.disease.slug} {r.resolution}px compute {r.mean_computation_s * 1e3:.2f} ms "
                  f"agreement {r.agreement:.3f}")
        assert {(r.disease, r.resolution) for r in rows} == {
            (d, s) for d in (DiseaseType.BLACKHEADS, DiseaseType.SPOTS) for s in (32, 128)}
        assert all(r.agreement >= 0.9 for r in rows)


# -- 10 ------------------------------------------------------------------------


def _independent_aisk(blob):
    """Parse a parameter bundle with nothing but struct and zlib."""
    assert blob[:4] == b"AISK"
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    assert zlib.crc32(body) == crc
    fmt, version, config_hash, count = struct.unpack_from("<HQQI", body)
    pos, tensors = 22, []
    for _ in range(count):
        rank = body[pos]
        dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
        pos += 1 + 4 * rank
        n = int(np.prod(dims))
        tensors.append(np.frombuffer(body, "<f4", n, pos).reshape(dims))
        pos += 4 * n
    assert pos == len(body)
    return version, config_hash, tensors, crc


def _independent_aisd(blob):
    assert blob[:4] == b"AISD"
    body, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    assert zlib.crc32(body) == crc
    _, count = struct.unpack_from("<HI", body)
    pos, out = 6, []
    for _ in range(count):
        sid, w, h, color, has, disease, positive = struct.unpack_from("<QHHBBBB", body, pos)
        pos += 16
        out.append((sid, w, h, color, has, disease, positive, body[pos:pos + w * h * 3]))
        pos += w * h * 3
    assert pos == len(body)
    return out


def test_c10_serialization_and_metadata(tmp_path):
    with criterion(10, "bit-exact files, independent CRC check, reference metadata", 10.0):
        model = _versioned(build_model(TINY_LENET, 9), 7)
        blob = serialize_parameters(model.to_parameters())
        path = tmp_path / "m.aisk"
        path.write_bytes(blob)
        back = deserialize_parameters(path.read_bytes(), TINY_LENET.config_hash)
        assert serialize_parameters(back) == blob
        version, config_hash, tensors, crc = _independent_aisk(blob)
        assert (version, config_hash, crc) == (7, TINY_LENET.config_hash, back.checksum)
        assert all(np.array_equal(a, b) for a, b in zip(tensors, model.tensors()))
        clone = Model.from_parameters(TINY_LENET, back)
        xs = np.random.default_rng(0).normal(size=(3, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(clone.forward(xs), model.forward(xs))

        samples = generate(GeneratorConfig(seed=4, samples_per_class=5), DiseaseType.BLACKHEADS)
        samples += [s.unlabeled() for s in samples[:3]]
        data = encode_dataset(samples)
        assert encode_dataset(decode_dataset(data)) == data
        records = _independent_aisd(data)
        for s, (sid, w, h, color, has, disease, positive, pixels) in zip(samples, records):
            assert (sid, w, h, color, pixels) == (s.sample_id, s.width, s.height, int(s.skin_color), s.pixels)
            if s.truth_label is None:
                assert has == 0
            else:
                assert (has, disease, positive) == (1, int(s.truth_label.disease_type),
                                                    int(s.truth_label.positive))

        def kinds(cfg):
            k = cfg.count_kinds()
            return k.get("Conv2D", 0), k.get("MaxPool2D", 0), k.get("Dense", 0)

        meta = {c.name: (c.learning_rate, c.iterations, c.train_batch, c.test_batch, c.dropout_rate,
                         kinds(c), (c.input_height, c.input_width))
                for c in (LENET5, ALEXNET, VGG16)}
        assert meta == {
            "LeNet-5": (0.001, 150, 64, 5, 0.6, (2, 2, 3), (228, 228)),
            "AlexNet": (0.001, 150, 64, 5, 0.6, (5, 3, 3), (227, 227)),
            "VGG16": (0.001, 200, 32, 5, 0.6, (13, 5, 3), (227, 227)),
        }


def test_criteria_helper_reports_failures():
    import criteria_log

    before = len(criteria_log.LINES)
    with pytest.raises(AssertionError):
        with criterion(0, "self-check", 1.0):
            assert False
    line = criteria_log.LINES.pop()
    assert len(criteria_log.LINES) == before and line.startswith("C0 FAIL")
