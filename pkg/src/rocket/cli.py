"""Command-line entry points: rocket-server, rocket-client, rocket-bench."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import time
from pathlib import Path

from . import bench as bench_mod
from .client import ClientConfig, connect
from .completion import calibrate
from .engine import DEFAULT_PROFILE, SimEngineConfig, load_profile, make_backend, save_profile
from .plotting import render_report_figures
from .runtime import Server, ServerConfig
from .timing import now_ns
from .transport import Mode

_SIZE_SUFFIXES = {
    "k": 10**3, "m": 10**6, "g": 10**9,
    "ki": 2**10, "mi": 2**20, "gi": 2**30,
}


def parse_size(text: str) -> int:
    raw = text.strip().lower().rstrip("b")
    for suffix in sorted(_SIZE_SUFFIXES, key=len, reverse=True):
        if raw.endswith(suffix):
            return int(float(raw[:-len(suffix)]) * _SIZE_SUFFIXES[suffix])
    return int(raw)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def server_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="rocket-server",
                                     description="Run a shared-memory IPC server")
    parser.add_argument("--name", default="main")
    parser.add_argument("--device", choices=("cpu", "sim"), default="sim")
    parser.add_argument("--profile", help="latency profile file (key=value lines)")
    parser.add_argument("--threads", type=int, default=2)
    parser.add_argument("--max-clients", type=int, default=8)
    parser.add_argument("--ring-capacity", type=int, default=64)
    parser.add_argument("--payload-bytes", default="64Mi",
                        help="per-direction payload pool per client")
    parser.add_argument("--batch-max", type=int, default=8)
    parser.add_argument("--batch-timeout-us", type=float, default=200.0)
    parser.add_argument("--offload-threshold", type=parse_size, default=65536)
    parser.add_argument("--pin", action="store_true", help="attempt to lock pages")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    profile = load_profile(args.profile) if args.profile else DEFAULT_PROFILE
    config = ServerConfig(
        name=args.name,
        max_clients=args.max_clients,
        ring_capacity=args.ring_capacity,
        payload_bytes_per_client=parse_size(args.payload_bytes),
        device=args.device,
        offload_threshold=args.offload_threshold,
        batch_max=args.batch_max,
        batch_timeout_us=args.batch_timeout_us,
        worker_threads=args.threads,
        sim=SimEngineConfig(l_fixed_us=profile.l_fixed_us,
                            alpha_us_per_mb=profile.alpha_us_per_mb),
        profile=profile,
        pin_memory=args.pin,
    )
    server = Server(config).start()
    print(f"rocket-server '{args.name}' serving on device={args.device} "
          f"(ctrl-c to stop)")
    stop = []
    signal.signal(signal.SIGINT, lambda *a: stop.append(1))
    signal.signal(signal.SIGTERM, lambda *a: stop.append(1))
    try:
        while not stop:
            time.sleep(0.2)
    finally:
        stats = server.stats()
        server.stop()
        print(f"jobs: {stats['jobs_received']} received, "
              f"{stats['jobs_done']} done, {stats['jobs_failed']} failed")
    return 0


def client_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="rocket-client",
                                     description="Smoke-test client")
    parser.add_argument("--server", default="main")
    parser.add_argument("--mode", choices=("sync", "async", "pipeline"), default="sync")
    parser.add_argument("--op", default="echo")
    parser.add_argument("--size", default="1M", help="payload size, e.g. 64K, 1M")
    parser.add_argument("--count", type=int, default=100)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    mode = {"sync": Mode.SYNC, "async": Mode.ASYNC, "pipeline": Mode.PIPELINE}[args.mode]
    size = parse_size(args.size)
    data = bytes(range(256)) * (size // 256 + 1)
    data = data[:size]
    session = connect(ClientConfig(server_name=args.server, mode=mode))
    lats = []
    try:
        t_start = now_ns()
        if mode == Mode.SYNC:
            for _ in range(args.count):
                t0 = now_ns()
                session.request_sync(args.op, data)
                lats.append((now_ns() - t0) / 1e3)
        elif mode == Mode.ASYNC:
            futures = []
            for _ in range(args.count):
                futures.append((now_ns(), session.request_async(args.op, data)))
            for t0, fut in futures:
                fut.get()
                lats.append((now_ns() - t0) / 1e3)
        else:
            jobs = [(now_ns(), session.request_pipeline(args.op, data))
                    for _ in range(args.count)]
            session.flush()
            for t0, job_id in jobs:
                while session.query_result(job_id) is bench_mod.NOT_READY:
                    time.sleep(50e-6)
                lats.append((now_ns() - t0) / 1e3)
        wall_s = (now_ns() - t_start) / 1e9
    finally:
        session.close()

    p50 = bench_mod.percentile_nearest_rank(lats, 50)
    p99 = bench_mod.percentile_nearest_rank(lats, 99)
    print(f"{args.count} x {args.op}({args.size}) mode={args.mode}: "
          f"p50={p50:.1f}us p99={p99:.1f}us throughput={args.count / wall_s:.0f} req/s")
    return 0


def _bench_matrix(args) -> int:
    base, axes = bench_mod.parse_scenario_file(args.config)
    reports, failures = bench_mod.run_matrix(base, axes)
    bench_mod.emit_csv(reports, args.out)
    print(f"wrote {len(reports)} rows to {args.out}"
          + (f" ({len(failures)} cells failed)" if failures else ""))
    for cell, err in failures:
        print(f"  failed cell {cell}: {err}", file=sys.stderr)
    if args.figures_dir:
        rows = bench_mod.parse_csv(args.out)
        paths = render_report_figures(rows, args.figures_dir, Path(args.out).stem)
        for p in paths:
            print(f"figure: {p}")
    return 0 if reports else 1


def _bench_calibrate(args) -> int:
    sizes = [int(float(s) * 10**6) for s in args.sizes.split(",")]
    backend = make_backend(args.device)
    try:
        profile = calibrate(backend, sizes, args.reps)
    finally:
        backend.close()
    save_profile(profile, args.out)
    print(f"calibrated: l_fixed={profile.l_fixed_us:.2f}us "
          f"alpha={profile.alpha_us_per_mb:.2f}us/MB "
          f"({profile.sample_count} samples) -> {args.out}")
    return 0


def _bench_plot(args) -> int:
    rows = bench_mod.parse_csv(args.csv)
    paths = render_report_figures(rows, args.out_dir, Path(args.csv).stem)
    for p in paths:
        print(f"figure: {p}")
    return 0


def bench_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="rocket-bench",
                                     description="Benchmark harness and calibration")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    matrix = sub.add_parser("matrix", help="run a scenario matrix, emit CSV")
    matrix.add_argument("--config", required=True, help="key=value scenario file")
    matrix.add_argument("--out", required=True, help="results CSV path")
    matrix.add_argument("--figures-dir", help="also render figures into this directory")

    cal = sub.add_parser("calibrate", help="fit the copy latency model")
    cal.add_argument("--device", choices=("cpu", "sim"), default="cpu")
    cal.add_argument("--sizes", default="1,2,4,8", help="MB values, comma-separated")
    cal.add_argument("--reps", type=int, default=20)
    cal.add_argument("--out", default="profile.txt")

    plot = sub.add_parser("plot", help="render figures from a results CSV")
    plot.add_argument("--csv", required=True)
    plot.add_argument("--out-dir", required=True)

    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    if args.command == "matrix":
        return _bench_matrix(args)
    if args.command == "calibrate":
        return _bench_calibrate(args)
    return _bench_plot(args)


if __name__ == "__main__":
    sys.exit(bench_main())
