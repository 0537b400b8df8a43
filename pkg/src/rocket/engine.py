"""Copy-engine abstraction: descriptors, completion records, two backends.

The submitter fills in a CopyDescriptor (source range, destination range,
length, cache-injection flag, completion record) and hands it to a backend.
The CPU backend runs the copy inline and returns with the record already
COMPLETE. The simulated backend returns immediately; a worker thread moves
the bytes, optionally warms the destination's cache lines, and publishes
COMPLETE no earlier than the modeled latency

    latency_us = l_fixed_us + alpha_us_per_mb * (length / 1e6)

after submission. Descriptors queued behind one another share the engine's
transfer pipe: the fixed setup portion overlaps with in-flight transfers, so
back-to-back submissions complete at roughly l_fixed + alpha * total_MB.
That is what makes batched submission amortize the fixed cost.

A completion record carries two completion times. complete_ts_ns is the
engine-reported completion instant (for the simulated backend, the modeled
deadline - what the device's own completion stamp would say). published_ts_ns
is the wall instant the status actually became observable, which may lag on
a loaded host. Readers that observe COMPLETE are guaranteed the destination
bytes equal the source bytes at submission time.
"""

from __future__ import annotations

import logging
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import Misaligned, OverlappingRanges, QueueFull
from .timing import now_ns, sleep_coarse_until, tune_interpreter

log = logging.getLogger(__name__)

CACHE_LINE = 64
MB = 10**6

# One giant buffer copy is a single C call that holds the GIL end to end;
# on a single-core host that convoys badly with waking threads. Copying in
# chunks gives the interpreter a release point every few hundred KB.
COPY_CHUNK = 256 * 1024


def chunked_copy(src_buf, src_off: int, dst_buf, dst_off: int, length: int) -> None:
    src = src_buf if isinstance(src_buf, memoryview) else memoryview(src_buf)
    dst = dst_buf if isinstance(dst_buf, memoryview) else memoryview(dst_buf)
    pos = 0
    while pos < length:
        n = min(COPY_CHUNK, length - pos)
        dst[dst_off + pos:dst_off + pos + n] = src[src_off + pos:src_off + pos + n]
        pos += n


def read_bytes(buf, off: int, length: int) -> bytes | memoryview:
    """Materialize buf[off:off+length] without one monolithic memory op.

    Large reads come back as a view over freshly allocated storage filled
    chunk by chunk. bytearray(n) would zero n bytes in one C call and a
    bytes() conversion would be one giant memcpy; both stall other threads.
    """
    if length <= COPY_CHUNK:
        return bytes(buf[off:off + length])
    arr = np.empty(length, dtype=np.uint8)
    chunked_copy(buf, off, arr, 0, length)
    return memoryview(arr)


class CompletionStatus(IntEnum):
    PENDING = 0
    COMPLETE = 1
    FAULTED = 2


class Device(IntEnum):
    CPU = 0
    OFFLOAD = 1


class CompletionRecord:
    """Status cell written exactly once by the engine.

    status transitions PENDING -> COMPLETE (or FAULTED, reserved for
    hardware backends) exactly once; a second publish raises.
    """

    __slots__ = ("status", "bytes_done", "submit_ts_ns", "complete_ts_ns", "published_ts_ns")

    def __init__(self):
        self.status = CompletionStatus.PENDING
        self.bytes_done = 0
        self.submit_ts_ns = 0
        self.complete_ts_ns = 0
        self.published_ts_ns = 0

    def _publish(self, status: CompletionStatus, bytes_done: int, complete_ts_ns: int) -> None:
        if self.status != CompletionStatus.PENDING:
            raise RuntimeError("completion record published twice")
        self.bytes_done = bytes_done
        self.complete_ts_ns = complete_ts_ns
        self.published_ts_ns = now_ns()
        self.status = status  # written last; readers key off this


@dataclass
class CopyDescriptor:
    """One offloadable memory-movement task.

    Ranges are (buffer, offset) pairs; offsets must be 64-byte aligned (the
    payload allocators guarantee this) and the ranges must not overlap when
    they live in the same buffer.
    """

    src_buf: memoryview | bytearray | bytes
    src_off: int
    dst_buf: memoryview | bytearray
    dst_off: int
    length: int
    cache_injection: bool = False
    completion: CompletionRecord = field(default_factory=CompletionRecord)

    def validate(self) -> None:
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.src_off % CACHE_LINE or self.dst_off % CACHE_LINE:
            raise Misaligned(f"offsets {self.src_off}/{self.dst_off}")
        if _same_allocation(self.src_buf, self.dst_buf):
            s0, s1 = self.src_off, self.src_off + self.length
            d0, d1 = self.dst_off, self.dst_off + self.length
            if s0 < d1 and d0 < s1:
                raise OverlappingRanges(f"[{s0},{s1}) vs [{d0},{d1})")
        if self.completion.status != CompletionStatus.PENDING:
            raise ValueError("completion record must be PENDING at submission")


def _same_allocation(a, b) -> bool:
    obj_a = a.obj if isinstance(a, memoryview) else a
    obj_b = b.obj if isinstance(b, memoryview) else b
    return obj_a is obj_b


@dataclass
class SubmitTicket:
    """Handle for an in-flight descriptor."""

    record: CompletionRecord
    length: int
    est_complete_ns: int
    device: Device


@dataclass
class EngineProfile:
    """Calibrated latency model: fixed setup cost plus per-MB transfer cost."""

    l_fixed_us: float
    alpha_us_per_mb: float
    calibrated_at: datetime | None = None
    sample_count: int = 0

    def __post_init__(self):
        if self.l_fixed_us <= 0 or self.alpha_us_per_mb <= 0:
            raise ValueError("profile parameters must be positive")


# Defaults measured on the reference machine; machine-dependent, so rerun
# the calibrate subcommand per host for faithful deferral timing.
DEFAULT_PROFILE = EngineProfile(l_fixed_us=73.6, alpha_us_per_mb=33.4)


def save_profile(profile: EngineProfile, path: str | Path) -> None:
    ts = (profile.calibrated_at or datetime.now(timezone.utc)).isoformat()
    Path(path).write_text(
        f"l_fixed_us={profile.l_fixed_us}\n"
        f"alpha_us_per_mb={profile.alpha_us_per_mb}\n"
        f"calibrated_at={ts}\n"
        f"sample_count={profile.sample_count}\n",
        encoding="utf-8",
    )


def load_profile(path: str | Path) -> EngineProfile:
    fields: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and "=" in line:
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    return EngineProfile(
        l_fixed_us=float(fields["l_fixed_us"]),
        alpha_us_per_mb=float(fields["alpha_us_per_mb"]),
        calibrated_at=datetime.fromisoformat(fields["calibrated_at"]),
        sample_count=int(fields.get("sample_count", "0")),
    )


def route_device(length: int, threshold: int, hint=None) -> Device:
    """Size-based routing: CPU below the threshold, offload at or above it.

    A non-AUTO hint wins unconditionally (user override).
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if hint is not None and int(hint) == 1:
        return Device.CPU
    if hint is not None and int(hint) == 2:
        return Device.OFFLOAD
    return Device.CPU if length < threshold else Device.OFFLOAD


def copy_cpu(src_buf, src_off: int, dst_buf, dst_off: int, length: int) -> float:
    """Plain synchronous copy; returns elapsed wall time in microseconds."""
    t0 = now_ns()
    chunked_copy(src_buf, src_off, dst_buf, dst_off, length)
    return (now_ns() - t0) / 1e3


def inject_touch(buf, off: int, length: int) -> int:
    """Read one byte of every cache line in [off, off+length); returns lines.

    Emulates directed cache injection: the engine worker pulls the freshly
    written destination into the cache level it shares with consumers. The
    observable contract is the touch itself plus the line count.
    """
    lines = (length + CACHE_LINE - 1) // CACHE_LINE
    pos = 0
    while pos < length:
        n = min(COPY_CHUNK, length - pos)
        arr = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + pos)
        arr[::CACHE_LINE].sum()
        pos += n
    return lines


class EngineStats:
    """Monotonic counters shared by both backends."""

    __slots__ = ("submits", "completions", "lines_touched", "cpu_copies", "queue_rejections")

    def __init__(self):
        self.submits = 0
        self.completions = 0
        self.lines_touched = 0
        self.cpu_copies = 0
        self.queue_rejections = 0

    def snapshot(self) -> dict:
        return {name: getattr(self, name) for name in self.__slots__}


class CpuBackend:
    """Synchronous backend: submit() performs the copy inline."""

    name = "cpu"

    def __init__(self):
        self.stats = EngineStats()

    def submit(self, desc: CopyDescriptor) -> SubmitTicket:
        desc.validate()
        rec = desc.completion
        rec.submit_ts_ns = now_ns()
        copy_cpu(desc.src_buf, desc.src_off, desc.dst_buf, desc.dst_off, desc.length)
        touched = 0
        if desc.cache_injection:
            touched = inject_touch(desc.dst_buf, desc.dst_off, desc.length)
        rec._publish(CompletionStatus.COMPLETE, desc.length, now_ns())
        self.stats.submits += 1
        self.stats.cpu_copies += 1
        self.stats.completions += 1
        self.stats.lines_touched += touched
        return SubmitTicket(record=rec, length=desc.length,
                            est_complete_ns=rec.complete_ts_ns, device=Device.CPU)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class SimEngineConfig:
    """Parameters of the simulated asynchronous backend."""

    l_fixed_us: float = DEFAULT_PROFILE.l_fixed_us
    alpha_us_per_mb: float = DEFAULT_PROFILE.alpha_us_per_mb
    queue_depth: int = 32
    workers: int = 1
    jitter_pct: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be >= 1")
        if not 0 <= self.jitter_pct <= 50:
            raise ValueError("jitter_pct must be within [0, 50]")
        if self.l_fixed_us <= 0 or self.alpha_us_per_mb <= 0:
            raise ValueError("latency parameters must be positive")

    def profile(self) -> EngineProfile:
        return EngineProfile(self.l_fixed_us, self.alpha_us_per_mb)


class SimEngine:
    """Simulated offload engine with a modeled completion deadline.

    Worker threads pop descriptors in submission order, perform the real
    byte copy, apply the cache-injection touch when asked, then wait out any
    remainder of the modeled deadline before publishing COMPLETE. Deadlines
    follow a single transfer pipe: a descriptor's transfer phase starts when
    the pipe frees up or its own setup latency elapses, whichever is later.
    submit() is safe from multiple threads; each record has one writer.
    """

    name = "sim"

    def __init__(self, config: SimEngineConfig | None = None):
        tune_interpreter()
        self.config = config or SimEngineConfig()
        self.stats = EngineStats()
        self._lock = threading.Lock()
        self._cv = threading.Condition(self._lock)
        self._queue: deque = deque()
        self._pipe_tail_ns = 0
        self._inflight = 0
        self._rng = random.Random(self.config.seed)
        self._stopping = False
        self._workers = [
            threading.Thread(target=self._worker_loop, name=f"sim-engine-{i}", daemon=True)
            for i in range(max(1, self.config.workers))
        ]
        for worker in self._workers:
            worker.start()

    # -- submission -----------------------------------------------------------
    def submit(self, desc: CopyDescriptor) -> SubmitTicket:
        desc.validate()
        cfg = self.config
        span_ns = (cfg.l_fixed_us + cfg.alpha_us_per_mb * (desc.length / MB)) * 1e3
        with self._cv:
            if self._inflight >= cfg.queue_depth:
                self.stats.queue_rejections += 1
                raise QueueFull(f"depth {cfg.queue_depth} reached")
            if cfg.jitter_pct:
                span_ns *= 1.0 + self._rng.uniform(-cfg.jitter_pct, cfg.jitter_pct) / 100.0
            now = now_ns()
            rec = desc.completion
            rec.submit_ts_ns = now
            setup_ns = int(cfg.l_fixed_us * 1e3)
            transfer_ns = int(span_ns) - setup_ns
            deadline = max(now + setup_ns, self._pipe_tail_ns) + max(transfer_ns, 0)
            self._pipe_tail_ns = deadline
            rec.complete_ts_ns = deadline
            self._inflight += 1
            self.stats.submits += 1
            self._queue.append((desc, deadline))
            self._cv.notify()
        return SubmitTicket(record=rec, length=desc.length,
                            est_complete_ns=deadline, device=Device.OFFLOAD)

    @property
    def inflight(self) -> int:
        return self._inflight

    # -- worker ---------------------------------------------------------------
    def _worker_loop(self) -> None:
        while True:
            with self._cv:
                while not self._queue and not self._stopping:
                    self._cv.wait()
                if self._stopping and not self._queue:
                    return
                desc, deadline = self._queue.popleft()
            touched = 0
            try:
                chunked_copy(desc.src_buf, desc.src_off, desc.dst_buf, desc.dst_off, desc.length)
                if desc.cache_injection:
                    touched = inject_touch(desc.dst_buf, desc.dst_off, desc.length)
                sleep_coarse_until(deadline)
                desc.completion._publish(CompletionStatus.COMPLETE, desc.length, deadline)
            except Exception:
                # a waiter is spinning on this record; fault it rather than
                # leaving it pending forever
                log.exception("engine worker faulted a descriptor")
                try:
                    desc.completion._publish(CompletionStatus.FAULTED, 0, now_ns())
                except Exception:
                    pass
            with self._lock:
                self._inflight -= 1
                self.stats.completions += 1
                self.stats.lines_touched += touched

    # -- lifecycle --------------------------------------------------------------
    def close(self) -> None:
        with self._cv:
            self._stopping = True
            self._cv.notify_all()
        for worker in self._workers:
            worker.join(timeout=2.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


CopyBackend = CpuBackend | SimEngine


def make_backend(device: str, sim_config: SimEngineConfig | None = None) -> CopyBackend:
    if device == "cpu":
        return CpuBackend()
    if device == "sim":
        return SimEngine(sim_config)
    raise ValueError(f"unknown device {device!r} (expected cpu or sim)")
