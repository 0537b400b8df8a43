"""Server-side execution stack.

One dispatcher thread round-robins over the connected clients' transmit
rings. REQUEST frames become jobs: sync and async jobs go straight to the
worker pool, pipelined jobs collect in a batch that flushes at batch_max or
after batch_timeout_us. QUERY frames become reply tasks answered from the
retained job table. Worker threads execute jobs (copy-in, handler stages,
copy-out) and publish responses through a per-client sequencer so a client's
responses always land in request order; publication order also fixes each
response's receive-payload slot (slot = seq mod capacity), which lets the
copy-out engine write straight into shared memory.

Response sequence numbers are handed out in the order tasks enter the worker
pool; a job sitting in the pipelined batcher has no sequence yet and can
never block a later response, preventing a single worker from wedging on its
publish turn.

Per-job cache injection resolves in three levels: a per-request override
wins, then the client-session default, then the server's per-mode policy
table (sync on; async on only while a single client is connected; pipelined
off).
"""

from __future__ import annotations

import logging
import queue
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

from . import transport
from .completion import PollPolicy, WaitStats, wait, wait_all
from .engine import (
    MB,
    CompletionStatus,
    CopyDescriptor,
    CpuBackend,
    Device,
    EngineProfile,
    SimEngine,
    SimEngineConfig,
    chunked_copy,
    route_device,
)
from .errors import QueueFull, RocketError
from .timing import now_ns, sleep_coarse_until, tune_interpreter
from .transport import (
    ControlBlock,
    DeviceHint,
    ErrorCode,
    InjectionHint,
    MessageHeader,
    MessageKind,
    Mode,
    QueuePair,
)

log = logging.getLogger(__name__)

OP_ECHO = 0x01
OP_CHECKSUM = 0x02
OP_SYNTHETIC = 0x03

_DISPATCH_IDLE_SLEEP_S = 100e-6
_SLOT_WAIT_SLEEP_S = 100e-6
_RESULT_RETENTION = 32  # DONE results kept per client for query re-reads
_RESULT_RETENTION_MAX_BYTES = 64 * 1024


class InjectionPolicy(IntEnum):
    OFF = 0
    ON = 1
    IF_SINGLE_CLIENT = 2


def default_injection_table() -> dict[Mode, InjectionPolicy]:
    return {
        Mode.SYNC: InjectionPolicy.ON,
        Mode.ASYNC: InjectionPolicy.IF_SINGLE_CLIENT,
        Mode.PIPELINE: InjectionPolicy.OFF,
    }


class JobState(IntEnum):
    RECEIVED = 0
    COPYING_IN = 1
    EXECUTING = 2
    COPYING_OUT = 3
    DONE = 4
    FAILED = 5


@dataclass
class StageCosts:
    """Synthetic workload stage durations (emulated as idle waits)."""

    pre_us: float = 0.0
    proc_us_per_mb: float = 0.0
    post_us: float = 0.0


@dataclass
class HandlerRegistration:
    op_code: int
    name: str
    execute: object  # Callable[[memoryview], bytes | memoryview]
    stage_costs: StageCosts | None = None


@dataclass
class JobStats:
    copy_in_us: float = 0.0
    wait_us: float = 0.0
    exec_us: float = 0.0
    copy_out_us: float = 0.0
    queue_us: float = 0.0
    polls: int = 0
    touches: int = 0
    device_used: int = 0


@dataclass
class JobRecord:
    job_id: int
    client_id: int
    op_code: int
    mode: Mode
    seq: int = -1
    state: JobState = JobState.RECEIVED
    payload_offset: int = 0
    payload_len: int = 0
    device_hint: DeviceHint = DeviceHint.AUTO
    injection_hint: InjectionHint = InjectionHint.DEFAULT
    ext: bytes = b""
    error: ErrorCode = ErrorCode.NONE
    result: bytes | None = None
    result_len: int = 0
    stats: JobStats = field(default_factory=JobStats)
    received_ns: int = 0
    done_ns: int = 0
    state_ns: dict = field(default_factory=dict)

    def advance(self, state: JobState) -> None:
        self.state = state
        self.state_ns[state] = now_ns()


@dataclass
class ServerConfig:
    name: str = "main"
    max_clients: int = 8
    ring_capacity: int = 64
    payload_bytes_per_client: int = 64 * 1024 * 1024
    device: str = "sim"
    offload_threshold: int = 64 * 1024
    default_cache_injection: dict = field(default_factory=default_injection_table)
    batch_max: int = 8
    batch_timeout_us: float = 200.0
    worker_threads: int = 2
    sim: SimEngineConfig = field(default_factory=SimEngineConfig)
    profile: EngineProfile | None = None
    pin_memory: bool = False

    def __post_init__(self):
        if self.batch_max < 1:
            raise ValueError("batch_max must be >= 1")
        if self.worker_threads < 1:
            raise ValueError("worker_threads must be >= 1")
        if self.device not in ("cpu", "sim"):
            raise ValueError("device must be cpu or sim")

    def effective_profile(self) -> EngineProfile:
        if self.profile is not None:
            return self.profile
        return self.sim.profile()


class _ClientState:
    """Server-side bookkeeping for one client slot."""

    __slots__ = ("pair", "seq", "next_pub", "pub_cv", "jobs", "done_ring", "retained")

    def __init__(self, pair: QueuePair):
        self.pair = pair
        self.seq = 0
        self.next_pub = 0
        self.pub_cv = threading.Condition()
        self.jobs: dict[int, JobRecord] = {}
        self.done_ring: deque = deque()
        self.retained: deque = deque()


def _builtin_checksum(data: memoryview) -> bytes:
    import numpy as np

    total = 0
    for pos in range(0, len(data), 256 * 1024):
        total += int(np.frombuffer(data[pos:pos + 256 * 1024], dtype=np.uint8)
                     .sum(dtype=np.uint64))
    return struct.pack("<Q", total & 0xFFFFFFFFFFFFFFFF)


class Server:
    """Shared-memory IPC server: message queues, engine, dispatcher, workers."""

    def __init__(self, config: ServerConfig | None = None):
        tune_interpreter()
        self.config = config or ServerConfig()
        self.profile = self.config.effective_profile()
        self.policy = PollPolicy()
        self._started = False
        self._handlers: dict[int, HandlerRegistration] = {}
        self._op_names: dict[str, int] = {}
        self._register_builtins()

        self._ctl_region = None
        self._ctl: ControlBlock | None = None
        self._clients: list[_ClientState] = []
        self._pool: queue.Queue = queue.Queue()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

        self.cpu = CpuBackend()
        self.sim = SimEngine(self.config.sim) if self.config.device == "sim" else None

        self._batch: list[JobRecord] = []
        self._batch_first_ns = 0

        self.jobs_received = 0
        self.jobs_done = 0
        self.jobs_failed = 0

    # -- registration -----------------------------------------------------------
    def _register_builtins(self) -> None:
        self.register("echo", OP_ECHO, lambda data: data)
        self.register("checksum", OP_CHECKSUM, _builtin_checksum)
        self.register("synthetic", OP_SYNTHETIC,
                      lambda data: struct.pack("<Q", len(data)),
                      stage_costs=StageCosts())

    def register(self, name: str, op_code: int, execute, stage_costs: StageCosts | None = None):
        if self._started:
            raise RocketError("register handlers before start()")
        if op_code in self._handlers:
            raise ValueError(f"op_code 0x{op_code:x} already registered")
        self._handlers[op_code] = HandlerRegistration(op_code, name, execute, stage_costs)
        self._op_names[name] = op_code

    # -- lifecycle ----------------------------------------------------------------
    def start(self) -> "Server":
        cfg = self.config
        # a batch larger than the ring could starve its own response slots
        cfg.batch_max = min(cfg.batch_max, cfg.ring_capacity)
        transport.unlink_server_segments(cfg.name, cfg.max_clients)
        self._ctl_region, self._ctl = transport.create_control(cfg.name, cfg.max_clients)
        self._ctl.initialize(
            max_clients=cfg.max_clients,
            ring_capacity=cfg.ring_capacity,
            device=1 if cfg.device == "sim" else 0,
            payload_bytes=cfg.payload_bytes_per_client,
            offload_threshold=cfg.offload_threshold,
            batch_max=cfg.batch_max,
            l_fixed_us=self.profile.l_fixed_us,
            alpha_us_per_mb=self.profile.alpha_us_per_mb,
        )
        self._ctl.publish_ops(self._op_names)
        for cid in range(cfg.max_clients):
            pair = transport.open_queue_pair(
                cfg.name, cid, cfg.ring_capacity, cfg.payload_bytes_per_client,
                control=self._ctl, pin=cfg.pin_memory,
            )
            self._clients.append(_ClientState(pair))
        # scratch must hold a full batch of staged request payloads
        scratch_bytes = max(1, cfg.batch_max) * ((self.slot_payload + 63) & ~63)
        self._scratch = [bytearray(scratch_bytes) for _ in range(cfg.worker_threads)]
        for scratch in self._scratch:
            for off in range(0, scratch_bytes, transport.PAGE_SIZE):
                scratch[off] = 0

        self._threads = [threading.Thread(target=self._dispatch_loop, name="dispatcher", daemon=True)]
        for i in range(cfg.worker_threads):
            self._threads.append(
                threading.Thread(target=self._worker_loop, args=(i,), name=f"worker-{i}", daemon=True)
            )
        self._started = True
        for t in self._threads:
            t.start()
        log.info("server %s up: device=%s capacity=%d slot=%d workers=%d",
                 cfg.name, cfg.device, cfg.ring_capacity, self.slot_payload, cfg.worker_threads)
        return self

    def stop(self) -> None:
        if not self._started:
            return
        self._stop.set()
        for _ in range(self.config.worker_threads):
            self._pool.put(None)
        for t in self._threads:
            t.join(timeout=5.0)
        if self.sim is not None:
            self.sim.close()
        for state in self._clients:
            state.pair.region.close()
            state.pair.region.unlink()
        if self._ctl_region is not None:
            self._ctl_region.close()
            self._ctl_region.unlink()
        self._started = False

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # -- introspection ---------------------------------------------------------
    @property
    def slot_payload(self) -> int:
        return self._clients[0].pair.geometry.slot_payload if self._clients else \
            transport.pair_geometry(self.config.ring_capacity,
                                    self.config.payload_bytes_per_client).slot_payload

    @property
    def active_clients(self) -> int:
        return self._ctl.active_clients if self._ctl else 0

    def publish_concurrency(self, active: int) -> None:
        """Force the advertised active-client count (tests and load shaping)."""
        self._ctl._set_active(active)

    def job(self, client_id: int, job_id: int) -> JobRecord | None:
        return self._clients[client_id].jobs.get(job_id)

    def stats(self) -> dict:
        out = {
            "jobs_received": self.jobs_received,
            "jobs_done": self.jobs_done,
            "jobs_failed": self.jobs_failed,
            "cpu": self.cpu.stats.snapshot(),
        }
        if self.sim is not None:
            out["sim"] = self.sim.stats.snapshot()
        return out

    # -- dispatcher ---------------------------------------------------------------
    def _dispatch_loop(self) -> None:
        cfg = self.config
        idle_scans = 0
        while not self._stop.is_set():
            found = 0
            try:
                for cid in range(cfg.max_clients):
                    if self._ctl.slot_state(cid) != 1:
                        continue
                    state = self._clients[cid]
                    for _ in range(cfg.ring_capacity):
                        raw = state.pair.tx_ring.pop()
                        if raw is None:
                            break
                        found += 1
                        self._dispatch_frame(cid, state, raw)
                self._check_batch_timeout()
            except Exception:
                log.exception("dispatcher error; continuing")
            if found:
                idle_scans = 0
            else:
                idle_scans += 1
                if idle_scans >= 2:
                    time.sleep(_DISPATCH_IDLE_SLEEP_S)
        # drain: flush whatever is parked in the batcher so counters balance
        self._flush_batch()

    def _dispatch_frame(self, cid: int, state: _ClientState, raw: bytes) -> None:
        try:
            header = MessageHeader.unpack(raw)
        except ValueError:
            job = JobRecord(job_id=0, client_id=cid, op_code=0, mode=Mode.SYNC,
                            error=ErrorCode.MALFORMED)
            self._submit_task(state, job)
            return

        if header.kind == MessageKind.QUERY:
            seq = state.seq
            state.seq += 1
            self._pool.put(("reply", cid, header.job_id, seq))
            return
        if header.kind != MessageKind.REQUEST:
            job = JobRecord(job_id=header.job_id, client_id=cid, op_code=header.op_code,
                            mode=header.mode, error=ErrorCode.MALFORMED)
            self._submit_task(state, job)
            return

        job = JobRecord(
            job_id=header.job_id, client_id=cid, op_code=header.op_code,
            mode=header.mode, payload_offset=header.payload_offset,
            payload_len=header.payload_len, device_hint=header.device_hint,
            injection_hint=header.injection_hint, ext=header.ext,
            received_ns=now_ns(),
        )
        self.jobs_received += 1
        geo = state.pair.geometry
        lo = geo.tx_payload_off
        hi = lo + geo.capacity * geo.slot_payload
        if header.payload_len and not (lo <= header.payload_offset and
                                       header.payload_offset + header.payload_len <= hi):
            job.error = ErrorCode.MALFORMED
        elif header.op_code not in self._handlers:
            job.error = ErrorCode.UNKNOWN_OP

        self._track(state, job)
        if job.error == ErrorCode.NONE and job.mode == Mode.PIPELINE:
            if not self._batch:
                self._batch_first_ns = now_ns()
            self._batch.append(job)
            if len(self._batch) >= self.config.batch_max:
                self._flush_batch()
        else:
            self._submit_task(state, job)

    def _track(self, state: _ClientState, job: JobRecord) -> None:
        state.jobs[job.job_id] = job
        state.retained.append(job.job_id)
        while len(state.retained) > 4 * self.config.ring_capacity:
            old = state.retained.popleft()
            state.jobs.pop(old, None)

    def _submit_task(self, state: _ClientState, job: JobRecord) -> None:
        job.seq = state.seq
        state.seq += 1
        self._pool.put(("job", job))

    def _flush_batch(self) -> None:
        if not self._batch:
            return
        batch, self._batch = self._batch, []
        for job in batch:  # sequence at flush so a parked batch never blocks the pool
            job.seq = self._clients[job.client_id].seq
            self._clients[job.client_id].seq += 1
        self._pool.put(("batch", batch))

    def _check_batch_timeout(self) -> None:
        if self._batch and (now_ns() - self._batch_first_ns) / 1e3 >= self.config.batch_timeout_us:
            self._flush_batch()

    # -- workers -------------------------------------------------------------------
    def _worker_loop(self, worker_idx: int) -> None:
        scratch = self._scratch[worker_idx]
        while True:
            task = self._pool.get()
            if task is None:
                return
            kind = task[0]
            try:
                if kind == "job":
                    self._run_job(task[1], scratch)
                elif kind == "batch":
                    self._run_batch(task[1], scratch)
                else:
                    self._run_reply(task[1], task[2], task[3])
            except Exception:
                log.exception("worker %d task failed", worker_idx)
                # every sequence number must publish something, or the
                # client's response stream wedges behind the gap
                self._salvage_task(kind, task)

    def _salvage_task(self, kind: str, task) -> None:
        try:
            if kind == "job":
                jobs = [task[1]]
            elif kind == "batch":
                jobs = task[1]
            else:
                state = self._clients[task[1]]
                header = MessageHeader(kind=MessageKind.ERROR, job_id=task[2],
                                       ext=transport.pack_error_ext(ErrorCode.HANDLER_FAILED))
                self._push_in_turn(state, task[3], header)
                return
            for job in jobs:
                if job.seq >= 0 and job.state not in (JobState.DONE, JobState.FAILED):
                    job.error = ErrorCode.HANDLER_FAILED
                    self._finish_error(self._clients[job.client_id], job)
        except Exception:
            log.exception("failed to salvage %s task; client stream may stall", kind)

    # -- copy plumbing ----------------------------------------------------------
    def _injection_on(self, job: JobRecord) -> bool:
        if job.injection_hint == InjectionHint.ON:
            return True
        if job.injection_hint == InjectionHint.OFF:
            return False
        policy = self.config.default_cache_injection.get(job.mode, InjectionPolicy.OFF)
        if policy == InjectionPolicy.IF_SINGLE_CLIENT:
            return self._ctl.active_clients == 1
        return policy == InjectionPolicy.ON

    def _submit_copy(self, src_buf, src_off, dst_buf, dst_off, length, injection, hint):
        """Route one copy; returns (ticket, device_used, submit_us)."""
        device = route_device(length, self.config.offload_threshold, hint)
        if self.sim is None:
            device = Device.CPU
        t0 = now_ns()
        desc = CopyDescriptor(src_buf=src_buf, src_off=src_off, dst_buf=dst_buf,
                              dst_off=dst_off, length=length, cache_injection=injection)
        if device == Device.OFFLOAD:
            while True:
                try:
                    ticket = self.sim.submit(desc)
                    break
                except QueueFull:
                    if hint != DeviceHint.OFFLOAD:
                        ticket = self.cpu.submit(desc)  # bounded queue: degrade, never pile on
                        device = Device.CPU
                        break
                    time.sleep(_SLOT_WAIT_SLEEP_S)
        else:
            ticket = self.cpu.submit(desc)
        return ticket, device, (now_ns() - t0) / 1e3

    def _await(self, job: JobRecord, ticket) -> WaitStats:
        stats = wait(ticket.record, self.policy, est_complete_ns=ticket.est_complete_ns)
        job.stats.wait_us += stats.waited_us
        job.stats.polls += stats.polls
        if stats.outcome != CompletionStatus.COMPLETE:
            raise RocketError(f"copy for job {job.job_id} ended {stats.outcome.name}")
        return stats

    def _wait_rx_slot(self, state: _ClientState, seq: int) -> None:
        cap = state.pair.geometry.capacity
        while seq - state.pair.rx_ring.tail >= cap and not self._stop.is_set():
            time.sleep(_SLOT_WAIT_SLEEP_S)

    # -- handler stages -----------------------------------------------------------
    def _stage_costs(self, job: JobRecord) -> StageCosts | None:
        reg = self._handlers[job.op_code]
        if reg.stage_costs is None:
            return None
        if job.op_code == OP_SYNTHETIC and len(job.ext) >= 12:
            pre, proc, post = transport.unpack_stage_ext(job.ext)
            if pre or proc or post:
                return StageCosts(pre, proc, post)
        return reg.stage_costs

    @staticmethod
    def _stage_sleep(us: float) -> None:
        if us > 0:
            sleep_coarse_until(now_ns() + int(us * 1e3))

    def _execute(self, job: JobRecord, view: memoryview, costs: StageCosts | None,
                 skip_pre: bool = False):
        t0 = now_ns()
        if costs is not None:
            if not skip_pre:
                self._stage_sleep(costs.pre_us)
            self._stage_sleep(costs.proc_us_per_mb * (job.payload_len / MB))
        result = self._handlers[job.op_code].execute(view)
        if costs is not None:
            self._stage_sleep(costs.post_us)
        job.stats.exec_us += (now_ns() - t0) / 1e3
        return result

    # -- job execution ---------------------------------------------------------
    def _run_job(self, job: JobRecord, scratch_in: bytearray) -> None:
        state = self._clients[job.client_id]
        if job.error != ErrorCode.NONE:
            self._finish_error(state, job)
            return
        try:
            injection = self._injection_on(job)
            costs = self._stage_costs(job)
            pair = state.pair

            job.advance(JobState.COPYING_IN)
            ticket, dev, submit_us = self._submit_copy(
                pair.region.buf, job.payload_offset, scratch_in, 0,
                job.payload_len, injection, job.device_hint,
            ) if job.payload_len else (None, Device.CPU, 0.0)
            job.stats.copy_in_us += submit_us
            job.stats.device_used = int(dev)
            if injection and job.payload_len:
                job.stats.touches += (job.payload_len + 63) // 64

            overlap_pre = job.mode == Mode.ASYNC and costs is not None and costs.pre_us > 0
            if overlap_pre:
                self._stage_sleep(costs.pre_us)  # runs while the copy is in flight
                job.stats.exec_us += costs.pre_us
            if ticket is not None:
                self._await(job, ticket)

            job.advance(JobState.EXECUTING)
            view = memoryview(scratch_in)[:job.payload_len]
            result = self._execute(job, view, costs, skip_pre=overlap_pre)
            self._finish_publish(state, job, result, injection)
        except Exception:
            log.exception("job %d/%d failed", job.client_id, job.job_id)
            job.error = ErrorCode.HANDLER_FAILED
            self._finish_error(state, job)

    def _run_batch(self, jobs: list[JobRecord], scratch_in: bytearray) -> None:
        """Pipelined path: back-to-back copy-ins, one collective wait, then
        per-job execution and back-to-back copy-outs with a second collective
        wait. Wait time and polls are attributed as per-job shares. All
        publication (results and errors alike) happens in one final ordered
        walk, so a mid-batch failure can never stall earlier publish turns.
        """
        live: list[tuple[JobRecord, int]] = []
        offset = 0
        for job in jobs:
            if job.error == ErrorCode.NONE:
                live.append((job, offset))
                offset += (job.payload_len + 63) & ~63
        if offset > len(scratch_in):  # spill guard: fall back to serial handling
            for job in jobs:
                self._run_job(job, scratch_in)
            return

        in_tickets = []
        for job, off in live:
            injection = self._injection_on(job)
            job.advance(JobState.COPYING_IN)
            if job.payload_len:
                pair = self._clients[job.client_id].pair
                ticket, dev, submit_us = self._submit_copy(
                    pair.region.buf, job.payload_offset, scratch_in, off,
                    job.payload_len, injection, job.device_hint,
                )
                job.stats.copy_in_us += submit_us
                job.stats.device_used = int(dev)
                if injection:
                    job.stats.touches += (job.payload_len + 63) // 64
                in_tickets.append((job, ticket))
        wstats = wait_all([t for _, t in in_tickets], self.policy)
        share = len(live) or 1
        for job, _ in live:
            job.stats.wait_us += wstats.waited_us / share
            job.stats.polls += max(1, wstats.polls // share)
        for job, ticket in in_tickets:
            if ticket.record.status != CompletionStatus.COMPLETE:
                job.error = ErrorCode.HANDLER_FAILED

        out_tickets = []
        for job, off in live:
            if job.error != ErrorCode.NONE:
                continue
            try:
                state = self._clients[job.client_id]
                job.advance(JobState.EXECUTING)
                view = memoryview(scratch_in)[off:off + job.payload_len]
                result = self._execute(job, view, self._stage_costs(job))
                ticket = self._start_copy_out(state, job, result, self._injection_on(job))
                if ticket is not None:
                    out_tickets.append(ticket)
            except Exception:
                log.exception("batch job %d/%d failed", job.client_id, job.job_id)
                job.error = ErrorCode.HANDLER_FAILED
        wstats = wait_all(out_tickets, self.policy)
        for job in jobs:
            state = self._clients[job.client_id]
            if job.error != ErrorCode.NONE:
                self._finish_error(state, job)
            else:
                job.stats.wait_us += wstats.waited_us / share
                job.stats.polls += max(1, wstats.polls // share)
                self._publish_response(state, job)

    # -- copy-out and publication -------------------------------------------------
    def _start_copy_out(self, state: _ClientState, job: JobRecord, result, injection: bool):
        result_len = len(result)
        if result_len > state.pair.geometry.slot_payload:
            raise ValueError("handler result exceeds payload slot")
        # Retain small results for later queries; big payloads recycle as
        # soon as the pushed response is consumed (re-copying megabytes per
        # job would dominate the batch path). Pipelined clients see pushed
        # responses anyway; a late query for a recycled result reads UNKNOWN.
        if result_len <= _RESULT_RETENTION_MAX_BYTES:
            job.result = bytes(result)
        job.result_len = result_len
        job.advance(JobState.COPYING_OUT)
        if result_len == 0:
            return None
        self._wait_rx_slot(state, job.seq)
        dst_off = state.pair.rx_slot_offset(job.seq)
        src = result if isinstance(result, memoryview) else memoryview(result)
        ticket, dev, submit_us = self._submit_copy(
            src, 0, state.pair.region.buf, dst_off, result_len, injection, job.device_hint,
        )
        job.stats.copy_out_us += submit_us
        if injection:
            job.stats.touches += (result_len + 63) // 64
        return ticket

    def _finish_publish(self, state: _ClientState, job: JobRecord, result, injection: bool):
        ticket = self._start_copy_out(state, job, result, injection)
        if ticket is not None:
            self._await(job, ticket)
        self._publish_response(state, job)

    def _publish_response(self, state: _ClientState, job: JobRecord) -> None:
        job.advance(JobState.DONE)
        job.done_ns = now_ns()
        self.jobs_done += 1
        state.done_ring.append(job.job_id)
        while len(state.done_ring) > _RESULT_RETENTION:
            evicted = state.jobs.get(state.done_ring.popleft())
            if evicted is not None:
                evicted.result = None  # slot recycled; later queries see UNKNOWN
        span_us = (job.done_ns - job.received_ns) / 1e3 if job.received_ns else 0.0
        stage_sum = job.stats.copy_in_us + job.stats.wait_us + job.stats.exec_us + job.stats.copy_out_us
        job.stats.queue_us = max(0.0, span_us - stage_sum)
        ext = transport.pack_stats_ext(
            job.stats.copy_in_us, job.stats.wait_us, job.stats.exec_us,
            job.stats.copy_out_us, job.stats.queue_us, job.stats.polls, job.stats.touches,
        )
        cap = state.pair.geometry.capacity
        header = MessageHeader(
            kind=MessageKind.RESPONSE, op_code=job.op_code, job_id=job.job_id,
            payload_offset=state.pair.rx_slot_offset(job.seq) if job.result_len else 0,
            payload_len=job.result_len, mode=job.mode, device_used=job.stats.device_used,
            gen=(job.seq // cap) & 0xFFFF, ext=ext,
        )
        self._push_in_turn(state, job.seq, header)

    def _finish_error(self, state: _ClientState, job: JobRecord) -> None:
        job.advance(JobState.FAILED)
        if job.received_ns:  # only accepted REQUESTs participate in job counting
            self.jobs_failed += 1
        header = MessageHeader(
            kind=MessageKind.ERROR, op_code=job.op_code, job_id=job.job_id,
            mode=job.mode, ext=transport.pack_error_ext(job.error),
        )
        self._push_in_turn(state, job.seq, header)

    def _run_reply(self, cid: int, job_id: int, seq: int) -> None:
        state = self._clients[cid]
        job = state.jobs.get(job_id)
        if job is None or (job.state == JobState.DONE and job.result is None and job.result_len):
            header = MessageHeader(kind=MessageKind.ERROR, job_id=job_id,
                                   ext=transport.pack_error_ext(ErrorCode.UNKNOWN_JOB))
        elif job.state == JobState.FAILED:
            header = MessageHeader(kind=MessageKind.ERROR, job_id=job_id,
                                   ext=transport.pack_error_ext(job.error or ErrorCode.HANDLER_FAILED))
        elif job.state != JobState.DONE:
            header = MessageHeader(kind=MessageKind.ERROR, job_id=job_id,
                                   ext=transport.pack_error_ext(ErrorCode.NOT_READY))
        else:
            result = job.result or b""
            self._wait_rx_slot(state, seq)
            dst_off = state.pair.rx_slot_offset(seq)
            if result:
                chunked_copy(result, 0, state.pair.region.buf, dst_off, len(result))
            cap = state.pair.geometry.capacity
            header = MessageHeader(
                kind=MessageKind.RESPONSE, op_code=job.op_code, job_id=job_id,
                payload_offset=dst_off if result else 0, payload_len=len(result),
                mode=job.mode, gen=(seq // cap) & 0xFFFF,
            )
        self._push_in_turn(state, seq, header)

    def _push_in_turn(self, state: _ClientState, seq: int, header: MessageHeader) -> None:
        raw = header.pack()
        with state.pub_cv:
            while state.next_pub < seq and not self._stop.is_set():
                state.pub_cv.wait(timeout=0.05)
            if state.next_pub > seq:
                return  # duplicate publish attempt for an already-served turn
            self._wait_rx_slot(state, seq)
            if not state.pair.rx_ring.push(raw) and not self._stop.is_set():
                log.error("rx ring push failed at seq %d", seq)
            state.next_pub = seq + 1
            state.pub_cv.notify_all()
