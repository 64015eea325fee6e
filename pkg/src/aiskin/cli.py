"""Command-line terminal client, experiment runner and node launcher."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from .core import DISEASE_TYPES, DiseaseType, ImageSample
from .dataset import (
    GeneratorConfig,
    derive_id,
    generate,
    generate_face,
    load_dataset,
    render_sample,
    save_dataset,
    split,
)
from .errors import AiSkinError, CorruptionError
from .filter import classify_skin_color

log = logging.getLogger("aiskin")


def _diseases(text: str) -> list:
    if not text or text.lower() in ("clean", "clean_face", "none"):
        return []
    try:
        return [DiseaseType.parse(t) for t in text.split(",") if t.strip()]
    except KeyError as exc:
        raise argparse.ArgumentTypeError(f"unknown disease type {exc}") from None


def _disease(text: str) -> DiseaseType:
    try:
        return DiseaseType.parse(text)
    except KeyError:
        raise argparse.ArgumentTypeError(f"unknown disease type {text!r}") from None


def _seeds(text: str) -> tuple:
    return tuple(int(s) for s in text.split(",") if s.strip())


def _out(args) -> Path:
    path = Path(args.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_image(path: Path) -> ImageSample:
    """First sample of a dataset file, or an HxWx3 uint8 ``.npy`` array."""
    if path.suffix == ".npy":
        array = np.load(path)
        sample = ImageSample.from_array(array, sample_id=derive_id("npy", path.name),
                                        skin_color=0)
        return ImageSample(sample.pixels, sample.width, sample.height, sample.sample_id,
                           classify_skin_color(sample))
    samples = load_dataset(path)
    if not samples:
        raise CorruptionError(f"{path} holds no samples")
    return samples[0]


# -- subcommands -----------------------------------------------------------------


def cmd_submit(args) -> int:
    from .harness import format_report, submit
    from .protocol import ErrorMessage

    if args.image:
        path = Path(args.image)
        if not path.is_file():
            print(f"error: cannot read image file {path}", file=sys.stderr)
            return 2
        try:
            sample = _load_image(path)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read image file {path}: {exc}", file=sys.stderr)
            return 2
    else:
        gen = GeneratorConfig(seed=args.seed, width=args.side, height=args.side)
        sample = render_sample(generate_face(gen, args.conditions, args.index, "submit"),
                               args.side, args.side, gen.noise_sigma)
    try:
        body, rtt = submit(args.edge, sample, timeout=args.timeout)
    except OSError as exc:
        print(f"error: cannot reach edge at {args.edge}: {exc}", file=sys.stderr)
        return 3
    if isinstance(body, ErrorMessage):
        print(f"edge error {body.status}: {body.message}", file=sys.stderr)
        return 1
    print(format_report(body))
    print(f"  round trip: {rtt * 1e3:.1f} ms")
    return 0


def cmd_delay_trials(args) -> int:
    from .harness import (
        ExperimentSpec,
        HarnessError,
        csv_delay_source,
        http_delay_source,
        run_delay_trials,
        write_delay_csv,
    )
    from .protocol import OVERHEAD, ideal_delay

    if args.metrics:
        source = http_delay_source(args.metrics)
    elif args.metrics_csv:
        source = csv_delay_source(args.metrics_csv)
    else:
        print("error: delay trials need --metrics URL or --metrics-csv PATH", file=sys.stderr)
        return 2
    spec = ExperimentSpec("delay_trials", trials=args.trials, bandwidth_bps=args.bandwidth,
                          image_side=args.side)
    try:
        run = run_delay_trials(spec, args.edge, source, seed=args.seed)
    except (HarnessError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    path = write_delay_csv(_out(args) / "delay_trials.csv", run.stats)
    frame_bytes = run.payload_bytes + OVERHEAD
    print(run.stats.summary())
    print(f"payload {run.payload_bytes} B (frame {frame_bytes} B); ideal transmission at "
          f"{args.bandwidth / 1e6:g} Mbps: {ideal_delay(frame_bytes, args.bandwidth) * 1e3:.3f} ms")
    print(f"harness round trip: mean {np.mean(run.round_trip_s) * 1e3:.3f} ms")
    print(f"wrote {path}")
    return 0


def _snapshots(args, diseases) -> dict:
    from .edge import Snapshot
    from .harness import train_models
    from .registry import AlgorithmRegistry

    if args.models:
        registry = AlgorithmRegistry()
        out = {}
        for d in diseases:
            path = Path(args.models) / f"{d.slug}.aisk"
            out[d] = Snapshot.from_bundle(d, path.read_bytes(), registry)
        return out
    trained = train_models(seed=args.seed, diseases=diseases)
    return {d: snap for d, (snap, _) in trained.items()}


def cmd_resolution_compare(args) -> int:
    from .harness import (
        RESOLUTION_COLUMNS,
        ExperimentSpec,
        resolution_csv_rows,
        run_resolution_compare,
        write_csv,
    )

    spec = ExperimentSpec("resolution_compare", resolutions=(args.low, args.high),
                          scenes=args.scenes)
    snapshots = _snapshots(args, args.diseases)
    rows = run_resolution_compare(spec, snapshots, args.seed, args.diseases)
    path = write_csv(_out(args) / "resolution_compare.csv", RESOLUTION_COLUMNS,
                     resolution_csv_rows(rows))
    print(f"{'disease':<13} {'resolution':>10} {'compute ms':>11} {'agreement':>10}")
    for r in rows:
        print(f"{r.disease.slug:<13} {r.resolution:>10} {r.mean_computation_s * 1e3:>11.3f} "
              f"{r.agreement:>10.3f}")
    print(f"wrote {path}")
    return 0


def cmd_closed_loop(args) -> int:
    from .harness import (
        CLOSED_LOOP_COLUMNS,
        ExperimentSpec,
        run_closed_loop,
        summarize_closed_loop,
        write_csv,
    )

    spec = ExperimentSpec("closed_loop", seeds=args.seeds, rounds=args.rounds,
                          disease=args.disease, threshold_bits=args.threshold)
    rows = run_closed_loop(spec, progress=print)
    path = write_csv(_out(args) / "closed_loop.csv", CLOSED_LOOP_COLUMNS,
                     [r.as_csv() for r in rows])
    s = summarize_closed_loop(rows)
    print(f"median final accuracy  no-loop {s.median_baseline:.4f}  filtered {s.median_filtered:.4f}"
          f"  random {s.median_random:.4f}")
    print(f"filtered >= no-loop - 0.02: {s.non_degradation}   "
          f"filtered >= random - 0.02: {s.filtered_vs_random}")
    print(f"wrote {path}")
    return 0


def cmd_generate_dataset(args) -> int:
    out = _out(args)
    gen = GeneratorConfig(seed=args.seed, samples_per_class=args.per_class, width=args.side,
                          height=args.side)
    for d in args.diseases:
        samples = generate(gen, d)
        path = out / f"{d.slug}.aisd"
        save_dataset(path, samples)
        print(f"{d.slug}: {len(samples)} samples -> {path}")
    return 0


def cmd_train_baseline(args) -> int:
    from .dataset import to_arrays
    from .neuralnet import accuracy, build_model
    from .registry import AlgorithmRegistry
    from .training import fit

    factory = AlgorithmRegistry().get(args.algorithm)
    config = factory.config
    out = _out(args)
    for d in args.diseases:
        if args.data:
            samples = load_dataset(Path(args.data) / f"{d.slug}.aisd")
        else:
            samples = generate(GeneratorConfig(seed=args.seed, samples_per_class=args.per_class), d)
        parts = split(samples, 0.85, args.seed)
        x, y = to_arrays(parts.train, config.input_height, config.input_width)
        xt, yt = to_arrays(parts.test, config.input_height, config.input_width)
        model = build_model(config, args.seed)
        history = fit(model, x, y, args.epochs, args.seed, x_test=xt, y_test=yt)
        model.version = 1
        path = out / f"{d.slug}.aisk"
        path.write_bytes(factory.serialize(model))
        save_dataset(out / f"{d.slug}.labeled.aisd", parts.train)
        print(f"{d.slug}: test accuracy {accuracy(model, xt, yt):.4f} after {len(history)} epochs "
              f"({sum(h.seconds for h in history):.1f} s) -> {path}")
    return 0


def _wait_forever(*closers) -> int:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    try:
        while not stop.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass
    for close in closers:
        close()
    return 0


def cmd_serve_edge(args) -> int:
    from .edge import EdgeConfig, EdgeNode, load_snapshots
    from .filter import FilterConfig
    from .links import TcpLink
    from .protocol import FrameServer

    config = EdgeConfig(
        filter=FilterConfig(args.threshold), pool_capacity=args.pool_capacity,
        filter_period_s=args.filter_period, bandwidth_bps=args.bandwidth or None,
        metrics_path=args.metrics, spool_dir=args.spool,
    )
    node = EdgeNode(config, cloud_link=TcpLink(args.cloud) if args.cloud else None)
    if args.models:
        for snap in load_snapshots(args.models, node.registry).values():
            node.install(snap)
    server = FrameServer(args.listen, node.handle_frame, ingress_bandwidth_bps=config.bandwidth_bps,
                         on_error=node.on_stream_error).start()
    node.config.listen_address = server.address
    node.start()
    node.pull_models()
    closers = [server.stop, node.stop]
    if args.admin:
        from .service import AdminServer, create_edge_app

        host, _, port = args.admin.rpartition(":")
        admin = AdminServer(create_edge_app(node), host or "127.0.0.1", int(port)).start()
        print(f"edge admin API at {admin.url}", flush=True)
        closers.insert(0, admin.stop)
    print(f"edge listening on {server.address}", flush=True)
    return _wait_forever(*closers)


def cmd_serve_cloud(args) -> int:
    from .cloud import CloudConfig, CloudNode
    from .protocol import FrameServer
    from .registry import AlgorithmRegistry

    config = CloudConfig(
        storage_dir=args.storage, algorithm=args.algorithm, epochs_per_round=args.epochs,
        min_new_samples=args.min_new_samples, medical_address=args.medical, seed=args.seed,
        push_period_s=args.push_period,
    )
    node = CloudNode(config, AlgorithmRegistry())
    if args.models:
        factory = node.registry.active(DISEASE_TYPES[0])
        for d in DISEASE_TYPES:
            path = Path(args.models) / f"{d.slug}.aisk"
            if path.exists() and node.model(d) is None:
                node.publish(d, factory.deserialize(path.read_bytes()))
            labeled = Path(args.models) / f"{d.slug}.labeled.aisd"
            if labeled.exists():
                node.set_labeled(d, load_dataset(labeled))
    server = FrameServer(args.listen, node.handle_frame, on_error=node.on_stream_error).start()
    node.start()
    closers = [server.stop, node.stop]
    if args.admin:
        from .service import AdminServer, create_cloud_app

        host, _, port = args.admin.rpartition(":")
        admin = AdminServer(create_cloud_app(node), host or "127.0.0.1", int(port)).start()
        print(f"cloud admin API at {admin.url}", flush=True)
        closers.insert(0, admin.stop)
    print(f"cloud listening on {server.address}", flush=True)
    return _wait_forever(*closers)


def cmd_serve_medical_stub(args) -> int:
    from .cloud import MedicalSiteStub
    from .protocol import FrameServer

    stub = MedicalSiteStub(args.log)
    server = FrameServer(args.listen, stub.handle_frame).start()
    print(f"medical stub listening on {server.address}", flush=True)
    return _wait_forever(server.stop)


# -- parser ----------------------------------------------------------------------


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags without defaults, so a value given
    # before the subcommand is not overwritten
    def d(value):
        return value if defaults else argparse.SUPPRESS

    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--edge", default=d("127.0.0.1:7001"), help="edge address host:port")
    flags.add_argument("--out", default=d("results"), help="output directory")
    flags.add_argument("--seed", type=int, default=d(0))
    flags.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return flags


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(defaults=False)
    parser = argparse.ArgumentParser(prog="aiskin", parents=[_global_flags(defaults=True)],
                                     description="Skin analysis edge/cloud loop and experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("submit", parents=[common], help="send one image and print the report")
    p.add_argument("--image", help="dataset file (first sample is sent) or HxWx3 uint8 .npy")
    p.add_argument("--conditions", type=_diseases, default=[],
                   help="generate a face with these conditions, e.g. acnes,spots (default clean)")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--timeout", type=float, default=30.0)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("delay-trials", parents=[common], help="sequential delay measurements")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--side", type=int, default=40, help="image side; 40 gives a ~4.8 kB payload")
    p.add_argument("--bandwidth", type=float, default=2_000_000.0, help="link bandwidth, bit/s")
    p.add_argument("--metrics", help="edge admin URL serving /metrics/delays")
    p.add_argument("--metrics-csv", help="edge delay CSV, when the edge runs on this host")
    p.set_defaults(func=cmd_delay_trials)

    p = sub.add_parser("resolution-compare", parents=[common],
                       help="verdict agreement and compute time at two resolutions")
    p.add_argument("--low", type=int, default=32)
    p.add_argument("--high", type=int, default=128)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--diseases", type=_diseases, default=[DiseaseType.BLACKHEADS, DiseaseType.SPOTS])
    p.add_argument("--models", help="directory of <disease>.aisk files (trained fresh if absent)")
    p.set_defaults(func=cmd_resolution_compare)

    p = sub.add_parser("closed-loop", parents=[common],
                       help="filtered vs random vs no-loop accuracy over rounds and seeds")
    p.add_argument("--seeds", type=_seeds, default=(0, 1, 2, 3, 4))
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--disease", type=_disease, default=DiseaseType.ACNES)
    p.add_argument("--threshold", type=float, default=0.3, help="entropy threshold in bits")
    p.set_defaults(func=cmd_closed_loop)

    p = sub.add_parser("generate-dataset", parents=[common], help="write synthetic dataset files")
    p.add_argument("--diseases", type=_diseases, default=list(DISEASE_TYPES))
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--side", type=int, default=32)
    p.set_defaults(func=cmd_generate_dataset)

    p = sub.add_parser("train-baseline", parents=[common],
                       help="train one model per disease and write parameter files")
    p.add_argument("--diseases", type=_diseases, default=list(DISEASE_TYPES))
    p.add_argument("--algorithm", default="TinyLeNet")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--per-class", type=int, default=600)
    p.add_argument("--data", help="directory of <disease>.aisd files (generated if absent)")
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("serve-edge", parents=[common], help="run an edge node")
    p.add_argument("--listen", default="127.0.0.1:7001")
    p.add_argument("--cloud", help="cloud address host:port")
    p.add_argument("--admin", help="admin HTTP address host:port")
    p.add_argument("--models", help="directory of initial <disease>.aisk files")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--pool-capacity", type=int, default=1024)
    p.add_argument("--filter-period", type=float, default=10.0)
    p.add_argument("--bandwidth", type=float, default=2_000_000.0,
                   help="terminal link emulation, bit/s (0 disables)")
    p.add_argument("--metrics", help="delay CSV output path")
    p.add_argument("--spool", help="directory for uploads awaiting the cloud")
    p.set_defaults(func=cmd_serve_edge)

    p = sub.add_parser("serve-cloud", parents=[common], help="run the cloud node")
    p.add_argument("--listen", default="127.0.0.1:7000")
    p.add_argument("--storage", default="cloud-data")
    p.add_argument("--algorithm", default="TinyLeNet")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--min-new-samples", type=int, default=32)
    p.add_argument("--medical", help="medical stub address host:port")
    p.add_argument("--admin", help="admin HTTP address host:port")
    p.add_argument("--models", help="directory from train-baseline to seed the models")
    p.add_argument("--push-period", type=float, default=5.0)
    p.set_defaults(func=cmd_serve_cloud)

    p = sub.add_parser("serve-medical-stub", parents=[common], help="run the medical-site stub")
    p.add_argument("--listen", default="127.0.0.1:7002")
    p.add_argument("--log", help="append notifications to this file")
    p.set_defaults(func=cmd_serve_medical_stub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except AiSkinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
