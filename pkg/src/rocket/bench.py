"""Benchmark harness: drive n clients against a server across a config matrix.

A Scenario pins one cell: workload, payload size, execution mode, device,
injection setting, client count, and batch size (batch doubles as the
in-flight window in async mode; sync ignores it). run_scenario launches a
fresh server plus n client processes, runs warmup + measured iterations per
client, and aggregates per-iteration records into a RunReport. run_matrix
crosses axis lists over a base scenario and emits one report per cell;
emit_csv writes the loss-free delimited form.

Latency is the client-observed end-to-end time per request. Stage columns
come from the server's per-response breakdown; the queue column is the slack
between end-to-end latency and the summed server stages (client-side copy,
ring hops, dispatch). Percentiles are nearest-rank over pooled post-warmup
iterations. In pipelined cells the wait/poll figures are per-job shares of
the batch's collective wait.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
import os
import secrets
import struct
import tempfile
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from . import transport
from .client import NOT_READY, ClientConfig, ClientSession, connect
from .engine import MB, SimEngineConfig
from .errors import ScenarioInvalid, ServerLaunchFailed
from .runtime import Server, ServerConfig
from .timing import now_ns, tune_interpreter
from .transport import DeviceHint, InjectionHint, Mode

log = logging.getLogger(__name__)

def _mp_context():
    """Measured processes come from a forkserver: plain fork hands every
    child a copy-on-write image of the orchestrator's whole address space,
    and the resulting fault churn skews numbers run to run. Forkserver
    children re-import __main__, so fall back to fork when the caller has
    no importable entry file (REPL, stdin)."""
    import sys

    main = sys.modules.get("__main__")
    main_file = getattr(main, "__file__", None)
    if main_file and os.path.exists(main_file):
        return multiprocessing.get_context("forkserver")
    return multiprocessing.get_context("fork")

CSV_HEADER = ("mode,device,injection,n,batch,payload_bytes,latency_p50_us,latency_p99_us,"
              "throughput_rps,copy_in_us,wait_us,exec_us,copy_out_us,poll_count,touch_count")

_MODE_NAMES = {Mode.SYNC: "sync", Mode.ASYNC: "async", Mode.PIPELINE: "pipeline"}
_MODES_BY_NAME = {v: k for k, v in _MODE_NAMES.items()}
_INJECTION_NAMES = {InjectionHint.DEFAULT: "default", InjectionHint.ON: "on", InjectionHint.OFF: "off"}
_INJECTIONS_BY_NAME = {v: k for k, v in _INJECTION_NAMES.items()}


class Workload(Enum):
    ECHO = "echo"
    CHECKSUM = "checksum"
    SYNTHETIC = "synthetic"


@dataclass
class Scenario:
    workload: Workload = Workload.ECHO
    payload_bytes: int = MB
    batch: int = 8
    clients: int = 1
    mode: Mode = Mode.SYNC
    device: str = "sim"
    injection: InjectionHint = InjectionHint.DEFAULT
    iterations: int = 40
    warmup: int = 5
    pre_us: float = 0.0
    proc_us_per_mb: float = 0.0
    post_us: float = 0.0
    device_hint: DeviceHint = DeviceHint.AUTO
    client_device_hint: DeviceHint = DeviceHint.AUTO
    worker_threads: int = 2
    offload_threshold: int = 64 * 1024
    sim: SimEngineConfig = field(default_factory=SimEngineConfig)

    def validate(self) -> None:
        if self.iterations <= self.warmup or self.warmup < 0:
            raise ScenarioInvalid("need iterations > warmup >= 0")
        if self.payload_bytes < 0 or self.batch < 1 or self.clients < 1:
            raise ScenarioInvalid("payload_bytes, batch and clients must be positive")
        if self.device not in ("cpu", "sim"):
            raise ScenarioInvalid(f"unknown device {self.device!r}")


@dataclass
class RunReport:
    scenario: Scenario
    latencies_us: list
    p50_us: float
    p99_us: float
    throughput_rps: float
    copy_in_us: float
    wait_us: float
    exec_us: float
    copy_out_us: float
    queue_us: float
    poll_count: float
    touch_count: float
    errors: int
    wall_s: float
    server_stats: dict
    client_engine_submits: int


def percentile_nearest_rank(values: list, pct: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, min(len(ordered), round(pct / 100.0 * len(ordered))))
    return float(ordered[rank - 1])


def _server_config(s: Scenario, name: str) -> ServerConfig:
    capacity = 16
    while capacity < 4 * s.batch:
        capacity *= 2
    slot = max((s.payload_bytes + 4096 + 63) & ~63, 64 * 1024)
    return ServerConfig(
        name=name,
        max_clients=s.clients,
        ring_capacity=capacity,
        payload_bytes_per_client=capacity * slot,
        device=s.device,
        offload_threshold=s.offload_threshold,
        batch_max=s.batch,
        worker_threads=s.worker_threads,
        sim=s.sim,
    )


def _expected_result(s: Scenario, data: bytes) -> bytes | None:
    if s.workload == Workload.ECHO:
        return data
    if s.workload == Workload.CHECKSUM:
        return struct.pack("<Q", sum(data) & 0xFFFFFFFFFFFFFFFF)
    return struct.pack("<Q", len(data))


def _matches(result, expected) -> bool:
    # windowed comparison: one giant memcmp is a single long C call, which
    # convoys badly against the runtime's threads on small hosts
    if result is None or expected is None or len(result) != len(expected):
        return False
    for pos in range(0, len(expected), 256 * 1024):
        if result[pos:pos + 262144] != expected[pos:pos + 262144]:
            return False
    return True


def _record(session: ClientSession, job_id: int, t0: int, t1: int, ok: bool) -> dict:
    stats = session.stats_for(job_id)
    rec = {
        "lat_us": (t1 - t0) / 1e3,
        "t0": t0,
        "t1": t1,
        "ok": ok,
    }
    if stats is not None:
        rec.update(
            copy_in_us=stats.copy_in_us, wait_us=stats.wait_us, exec_us=stats.exec_us,
            copy_out_us=stats.copy_out_us, queue_us=stats.queue_us,
            polls=stats.polls, touches=stats.touches,
        )
    return rec


def _drive_sync(session: ClientSession, s: Scenario, op: str, data: bytes,
                expected: bytes | None) -> list:
    records = []
    for _ in range(s.iterations):
        t0 = now_ns()
        if s.workload == Workload.SYNTHETIC:
            result = session.request_synthetic(data, s.pre_us, s.proc_us_per_mb,
                                               s.post_us, device=_hint(s))
            job_id = session._next_job_id - 1
        else:
            result = session.request_sync(op, data, device=_hint(s), cache_injection=_inj(s))
            job_id = session._next_job_id - 1
        records.append(_record(session, job_id, t0, now_ns(), _matches(result, expected)))
    return records


def _drive_async(session: ClientSession, s: Scenario, op: str, data: bytes,
                 expected: bytes | None) -> list:
    records = []
    window: list[tuple[int, object]] = []  # (t_submit, future)
    depth = max(1, s.batch)
    submitted = 0
    while submitted < s.iterations or window:
        if submitted < s.iterations and len(window) < depth:
            t0 = now_ns()
            if s.workload == Workload.SYNTHETIC:
                fut = session.request_synthetic(data, s.pre_us, s.proc_us_per_mb,
                                                s.post_us, device=_hint(s))
            else:
                fut = session.request_async(op, data, device=_hint(s), cache_injection=_inj(s))
            window.append((t0, fut))
            submitted += 1
            continue
        t0, fut = window.pop(0)
        result = fut.get()
        records.append(_record(session, fut.job_id, t0, now_ns(), _matches(result, expected)))
    return records


def _drive_pipeline(session: ClientSession, s: Scenario, op: str, data: bytes,
                    expected: bytes | None) -> list:
    """Keep two batches in flight: submit batch k+1 while the server chews on
    batch k, then collect k's results by job id. This is the usual shape of
    batched submission with deferred queries."""
    records = []

    def submit_group(count: int) -> list:
        group = []
        for _ in range(count):
            t0 = now_ns()
            if s.workload == Workload.SYNTHETIC:
                job_id = session.request_pipeline(op, data, device=_hint(s),
                                                  pre_us=s.pre_us,
                                                  proc_us_per_mb=s.proc_us_per_mb,
                                                  post_us=s.post_us)
            else:
                job_id = session.request_pipeline(op, data, device=_hint(s),
                                                  cache_injection=_inj(s))
            group.append((t0, job_id))
        session.flush()
        return group

    remaining = s.iterations
    in_flight: list[list] = []
    while remaining or in_flight:
        while remaining and len(in_flight) < 2:
            count = min(s.batch, remaining)
            in_flight.append(submit_group(count))
            remaining -= count
        for t0, job_id in in_flight.pop(0):
            result = session.query_result(job_id)
            while result is NOT_READY:
                time.sleep(200e-6)
                result = session.query_result(job_id)
            records.append(_record(session, job_id, t0, now_ns(), _matches(result, expected)))
    return records


def _hint(s: Scenario) -> DeviceHint | None:
    return s.device_hint if s.device_hint != DeviceHint.AUTO else None


def _inj(s: Scenario) -> InjectionHint | None:
    return s.injection if s.injection != InjectionHint.DEFAULT else None


def _client_proc(s: Scenario, server_name: str, idx: int, out_path: str) -> None:
    tune_interpreter()
    # build payloads before connect: once the session's engine worker is up,
    # monolithic buffer construction would convoy against it
    op = s.workload.value if s.workload != Workload.SYNTHETIC else "synthetic"
    if s.payload_bytes:
        rng_data = secrets.token_bytes(min(s.payload_bytes, 64 * 1024))
        data = (rng_data * (s.payload_bytes // len(rng_data) + 1))[:s.payload_bytes]
    else:
        data = b""
    expected = _expected_result(s, data)
    local = s.client_device_hint if s.client_device_hint != DeviceHint.AUTO else None
    config = ClientConfig(server_name=server_name, mode=s.mode,
                          local_device_hint=local,
                          cache_injection=s.injection, pipeline_batch=s.batch)
    session = connect(config)
    try:
        if s.mode == Mode.SYNC:
            records = _drive_sync(session, s, op, data, expected)
        elif s.mode == Mode.ASYNC:
            records = _drive_async(session, s, op, data, expected)
        else:
            records = _drive_pipeline(session, s, op, data, expected)
        payload = {
            "records": records,
            "engine_submits": session.engine.stats.submits if session.engine else 0,
        }
        Path(out_path).write_text(json.dumps(payload), encoding="utf-8")
    finally:
        session.close()


def aggregate(scenario: Scenario, per_client_records: list[list], wall_s: float,
              server_stats: dict, client_engine_submits: int) -> RunReport:
    """Fold per-client iteration records into one report, excluding warmup."""
    measured = []
    for records in per_client_records:
        measured.append(records[scenario.warmup:])
    lats = [r["lat_us"] for recs in measured for r in recs]
    errors = sum(1 for recs in measured for r in recs if not r.get("ok", True))
    starts = [recs[0]["t0"] for recs in measured if recs]
    ends = [recs[-1]["t1"] for recs in measured if recs]
    window_s = (max(ends) - min(starts)) / 1e9 if starts else 0.0
    count = len(lats)

    def mean(key: str) -> float:
        vals = [r[key] for recs in measured for r in recs if key in r]
        return sum(vals) / len(vals) if vals else 0.0

    return RunReport(
        scenario=scenario,
        latencies_us=lats,
        p50_us=percentile_nearest_rank(lats, 50),
        p99_us=percentile_nearest_rank(lats, 99),
        throughput_rps=count / window_s if window_s > 0 else 0.0,
        copy_in_us=mean("copy_in_us"),
        wait_us=mean("wait_us"),
        exec_us=mean("exec_us"),
        copy_out_us=mean("copy_out_us"),
        queue_us=mean("queue_us"),
        poll_count=mean("polls"),
        touch_count=mean("touches"),
        errors=errors,
        wall_s=wall_s,
        server_stats=server_stats,
        client_engine_submits=client_engine_submits,
    )


def _server_proc(s: Scenario, name: str, ready, stop, stats_path: str) -> None:
    tune_interpreter()
    server = Server(_server_config(s, name)).start()
    try:
        ready.set()
        stop.wait()
        Path(stats_path).write_text(json.dumps(server.stats()), encoding="utf-8")
    finally:
        server.stop()


def run_scenario(s: Scenario) -> RunReport:
    """Run one cell: a fresh server process, n client processes, one report."""
    s.validate()
    name = f"bench{os.getpid()}x{secrets.token_hex(3)}"
    t_start = time.perf_counter()
    out_dir = tempfile.mkdtemp(prefix="rocket-bench-")
    stats_path = os.path.join(out_dir, "server.json")
    ctx = _mp_context()
    ready = ctx.Event()
    stop = ctx.Event()
    server = ctx.Process(target=_server_proc, args=(s, name, ready, stop, stats_path),
                         daemon=True)
    procs = []
    out_paths = []
    try:
        server.start()
        if not ready.wait(timeout=60.0):
            raise ServerLaunchFailed("server did not come up within 60 s")
        for idx in range(s.clients):
            out_path = os.path.join(out_dir, f"client{idx}.json")
            out_paths.append(out_path)
            proc = ctx.Process(target=_client_proc, args=(s, name, idx, out_path),
                               daemon=True)
            proc.start()
            procs.append(proc)
        budget_s = 90.0 + s.iterations * s.clients * max(s.payload_bytes / MB, 1.0) * 0.02
        deadline = time.monotonic() + budget_s
        for proc in procs:
            proc.join(timeout=max(1.0, deadline - time.monotonic()))
            if proc.exitcode is None:
                proc.terminate()
                raise ServerLaunchFailed(f"client timed out after {budget_s:.0f}s")
            if proc.exitcode != 0:
                raise ServerLaunchFailed(f"client exited with {proc.exitcode}")
        per_client = []
        submits = 0
        for out_path in out_paths:
            payload = json.loads(Path(out_path).read_text(encoding="utf-8"))
            per_client.append(payload["records"])
            submits += payload["engine_submits"]
        stop.set()
        server.join(timeout=30.0)
        stats = json.loads(Path(stats_path).read_text(encoding="utf-8")) \
            if os.path.exists(stats_path) else {}
    finally:
        stop.set()
        for proc in procs:
            if proc.is_alive():
                proc.terminate()
        if server.is_alive():
            server.join(timeout=10.0)
            if server.is_alive():
                server.terminate()
        transport.unlink_server_segments(name, s.clients)
    wall_s = time.perf_counter() - t_start
    return aggregate(s, per_client, wall_s, stats, submits)


_AXIS_FIELDS = {
    "modes": ("mode", lambda v: _MODES_BY_NAME[v]),
    "devices": ("device", str),
    "injections": ("injection", lambda v: _INJECTIONS_BY_NAME[v]),
    "clients": ("clients", int),
    "batches": ("batch", int),
    "payloads": ("payload_bytes", int),
}


def run_matrix(base: Scenario, axes: dict) -> tuple[list[RunReport], list[tuple[dict, str]]]:
    """Cross the axis lists over the base scenario; one report per cell.

    Per-cell failures are collected, not fatal: the rest of the matrix runs.
    """
    cells: list[dict] = [{}]
    for axis, values in axes.items():
        if axis not in _AXIS_FIELDS:
            raise ScenarioInvalid(f"unknown axis {axis!r}")
        if not values:
            raise ScenarioInvalid(f"axis {axis!r} is empty")
        field_name, conv = _AXIS_FIELDS[axis]
        cells = [dict(cell, **{field_name: conv(v) if isinstance(v, str) else v})
                 for cell in cells for v in values]
    reports: list[RunReport] = []
    failures: list[tuple[dict, str]] = []
    for cell in cells:
        scenario = replace(base, **cell)
        try:
            reports.append(run_scenario(scenario))
        except Exception as exc:  # keep the sweep alive
            log.warning("cell %s failed: %s", cell, exc)
            failures.append((cell, str(exc)))
    return reports, failures


def emit_csv(reports: list[RunReport], path: str | Path) -> None:
    lines = [CSV_HEADER]
    for r in reports:
        s = r.scenario
        lines.append(",".join([
            _MODE_NAMES[s.mode],
            s.device,
            _INJECTION_NAMES[s.injection],
            str(s.clients),
            str(s.batch),
            str(s.payload_bytes),
            repr(round(r.p50_us, 6)),
            repr(round(r.p99_us, 6)),
            repr(round(r.throughput_rps, 6)),
            repr(round(r.copy_in_us, 6)),
            repr(round(r.wait_us, 6)),
            repr(round(r.exec_us, 6)),
            repr(round(r.copy_out_us, 6)),
            repr(round(r.poll_count, 6)),
            repr(round(r.touch_count, 6)),
        ]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_csv(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError("unrecognized results header")
    columns = CSV_HEADER.split(",")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row: dict = dict(zip(columns, parts))
        for key in ("n", "batch", "payload_bytes"):
            row[key] = int(row[key])
        for key in ("latency_p50_us", "latency_p99_us", "throughput_rps", "copy_in_us",
                    "wait_us", "exec_us", "copy_out_us", "poll_count", "touch_count"):
            row[key] = float(row[key])
        rows.append(row)
    return rows


def parse_scenario_file(path: str | Path) -> tuple[Scenario, dict]:
    """key=value scenario format; plural keys become matrix axes."""
    base = Scenario()
    axes: dict = {}
    scalar_fields = {
        "workload": lambda v: Workload(v),
        "payload_bytes": int,
        "batch": int,
        "iterations": int,
        "warmup": int,
        "pre_us": float,
        "proc_us_per_mb": float,
        "post_us": float,
        "worker_threads": int,
        "offload_threshold": int,
        "mode": lambda v: _MODES_BY_NAME[v],
        "device": str,
        "injection": lambda v: _INJECTIONS_BY_NAME[v],
    }
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ScenarioInvalid(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _AXIS_FIELDS:
            axes[key] = [v.strip() for v in value.split(",") if v.strip()]
        elif key in scalar_fields:
            setattr(base, key, scalar_fields[key](value))
        else:
            raise ScenarioInvalid(f"line {lineno}: unknown key {key!r}")
    base.validate()
    return base, axes
