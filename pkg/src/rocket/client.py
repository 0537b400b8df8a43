"""Client-side session API.

A session is bound to one execution mode for its whole lifetime:

* SYNC      request() blocks and returns the result bytes.
* ASYNC     request() returns a future; completion is checked explicitly.
* PIPELINE  request() returns a job id immediately; the session queues the
            transfer internally, flushes queued requests as a batch, and
            results are fetched by job id via query_result().

Request data is staged into the transmit payload range through the same
copy-engine abstraction the server uses, so large client-side copies are
offloaded symmetrically (size-routed, per-request override wins). The whole
shared mapping is established once at connect and reused for the session;
the session counts its own mapping calls so tests can assert zero remaps.

Sessions are single-threaded by contract; a ResponseFuture may be read from
another thread once the session owner stops touching the session.
"""

from __future__ import annotations

import enum
import logging
import os
import time
from dataclasses import dataclass

from . import transport
from .completion import PollPolicy, wait, wait_all
from .engine import (
    CompletionStatus,
    CopyDescriptor,
    CpuBackend,
    Device,
    EngineProfile,
    SimEngine,
    SimEngineConfig,
    read_bytes,
    route_device,
)
from .errors import PayloadTooLarge, QueueFull, RocketError, ServerError, TooManyClients
from .timing import now_ns, tune_interpreter
from .transport import (
    DeviceHint,
    ErrorCode,
    InjectionHint,
    MessageHeader,
    MessageKind,
    Mode,
)

log = logging.getLogger(__name__)

_PUMP_IDLE_SLEEP_S = 100e-6
_RESULT_CACHE_LIMIT = 128
_RESULT_CACHE_BYTES = 64 * 10**6
_STATS_CACHE_LIMIT = 512


class QueryOutcome(enum.Enum):
    NOT_READY = "not_ready"
    UNKNOWN = "unknown"


NOT_READY = QueryOutcome.NOT_READY
UNKNOWN = QueryOutcome.UNKNOWN


class FutureState(enum.Enum):
    PENDING = "pending"
    READY = "ready"
    FAILED = "failed"


@dataclass
class ClientConfig:
    server_name: str = "main"
    mode: Mode = Mode.SYNC
    device_hint: DeviceHint = DeviceHint.AUTO
    cache_injection: InjectionHint = InjectionHint.DEFAULT
    pipeline_batch: int = 0  # 0: adopt the server's batch_max
    # route for staging data into the tx payload range; None follows the
    # request's effective device hint (symmetric client-side offload)
    local_device_hint: DeviceHint | None = None


@dataclass
class RequestStats:
    """Per-request timings observed by the client plus the server's breakdown."""

    e2e_us: float = 0.0
    tx_copy_us: float = 0.0
    copy_in_us: float = 0.0
    wait_us: float = 0.0
    exec_us: float = 0.0
    copy_out_us: float = 0.0
    queue_us: float = 0.0
    polls: int = 0
    touches: int = 0
    device_used: int = 0


class ResponseFuture:
    """Handle for an in-flight async request; get() resolves it."""

    def __init__(self, session: "ClientSession", job_id: int):
        self._session = session
        self.job_id = job_id
        self.state = FutureState.PENDING
        self._result: bytes | None = None
        self._error: ServerError | None = None

    def _resolve(self, result: bytes | None, error: ServerError | None) -> None:
        self._result = result
        self._error = error
        self.state = FutureState.FAILED if error else FutureState.READY

    def get(self, timeout_s: float | None = None) -> bytes:
        deadline = None if timeout_s is None else time.monotonic() + timeout_s
        while self.state == FutureState.PENDING:
            self._session._pump(block=True, deadline=deadline)
            if deadline is not None and time.monotonic() > deadline and \
                    self.state == FutureState.PENDING:
                raise TimeoutError(f"job {self.job_id} still pending")
        if self._error is not None:
            raise self._error
        return self._result


@dataclass
class _PendingPush:
    job_id: int
    slot: int
    header: MessageHeader
    ticket: object | None
    tx_copy_us: float
    submitted_ns: int


class ClientSession:
    """One connected client: queue pair, payload slots, local copy engine."""

    def __init__(self, config: ClientConfig):
        tune_interpreter()
        self.config = config
        self.map_calls = 0

        with transport.connect_lock(config.server_name):
            self._ctl_region, self._ctl = transport.attach_control(config.server_name)
            self.map_calls += 1
            slot = self._ctl.claim_slot(os.getpid())
            if slot is None:
                self._ctl_region.close()
                raise TooManyClients(config.server_name)
            self.client_id = slot
        self.ops = self._ctl.read_ops()
        l_fixed, alpha = self._ctl.latency_model
        self.profile = EngineProfile(l_fixed, alpha)
        self.offload_threshold = self._ctl.offload_threshold
        self.pipeline_batch = config.pipeline_batch or self._ctl.batch_max
        self.pair = transport.attach_queue_pair(
            config.server_name, self.client_id,
            self._ctl.ring_capacity, self._ctl.payload_bytes,
        )
        self.map_calls += 1

        if self._ctl.device == 1:
            self.engine = SimEngine(SimEngineConfig(l_fixed_us=l_fixed, alpha_us_per_mb=alpha))
        else:
            self.engine = None
        self.cpu = CpuBackend()
        self.policy = PollPolicy()

        cap = self.pair.geometry.capacity
        self._free_slots = list(range(cap - 1, -1, -1))
        self._slot_of_job: dict[int, int] = {}
        self._next_job_id = 1
        self._pending: list[_PendingPush] = []
        self._futures: dict[int, ResponseFuture] = {}
        self._results: dict[int, bytes | ServerError] = {}
        self._result_bytes = 0
        self._stats: dict[int, RequestStats] = {}
        self._closed = False

    # -- lifecycle ---------------------------------------------------------------
    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            with transport.connect_lock(self.config.server_name):
                self._ctl.release_slot(self.client_id)
        finally:
            if self.engine is not None:
                self.engine.close()
            self.pair.close()
            self._ctl_region.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- request entry points ------------------------------------------------------
    def request_sync(self, op: str, data: bytes, *, device: DeviceHint | None = None,
                     cache_injection: InjectionHint | None = None) -> bytes:
        self._require_mode(Mode.SYNC)
        t0 = now_ns()
        job_id = self._enqueue(op, data, Mode.SYNC, device, cache_injection)
        self._push_pending()
        result = self._await_result(job_id)
        self._note_e2e(job_id, t0)
        if isinstance(result, ServerError):
            raise result
        return result

    def request_async(self, op: str, data: bytes, *, device: DeviceHint | None = None,
                      cache_injection: InjectionHint | None = None) -> ResponseFuture:
        self._require_mode(Mode.ASYNC)
        job_id = self._enqueue(op, data, Mode.ASYNC, device, cache_injection)
        self._push_pending()
        return self._future_for(job_id)

    def _future_for(self, job_id: int) -> ResponseFuture:
        future = ResponseFuture(self, job_id)
        early = self._results.pop(job_id, None)
        if isinstance(early, ServerError):  # staging failed before the push
            future._resolve(None, early)
        elif early is not None:
            self._result_bytes -= self._sizeof(early)
            future._resolve(early, None)
        else:
            self._futures[job_id] = future
        return future

    def request_pipeline(self, op: str, data: bytes, *, device: DeviceHint | None = None,
                         cache_injection: InjectionHint | None = None,
                         pre_us: float = 0.0, proc_us_per_mb: float = 0.0,
                         post_us: float = 0.0) -> int:
        self._require_mode(Mode.PIPELINE)
        ext = b""
        if pre_us or proc_us_per_mb or post_us:
            ext = transport.pack_stage_ext(pre_us, proc_us_per_mb, post_us)
        job_id = self._enqueue(op, data, Mode.PIPELINE, device, cache_injection, ext=ext)
        if len(self._pending) >= self.pipeline_batch:
            self.flush()
        return job_id

    def request_synthetic(self, data: bytes, pre_us: float, proc_us_per_mb: float,
                          post_us: float, *, device: DeviceHint | None = None,
                          cache_injection: InjectionHint | None = None
                          ) -> bytes | ResponseFuture | int:
        """Stage-cost request in whatever mode this session runs."""
        ext = transport.pack_stage_ext(pre_us, proc_us_per_mb, post_us)
        t0 = now_ns()
        job_id = self._enqueue("synthetic", data, self.config.mode, device,
                               cache_injection, ext=ext)
        if self.config.mode == Mode.PIPELINE:
            if len(self._pending) >= self.pipeline_batch:
                self.flush()
            return job_id
        self._push_pending()
        if self.config.mode == Mode.ASYNC:
            return self._future_for(job_id)
        result = self._await_result(job_id)
        self._note_e2e(job_id, t0)
        if isinstance(result, ServerError):
            raise result
        return result

    def query_result(self, job_id: int) -> bytes | QueryOutcome:
        """Fetch a pipelined result by id: bytes, NOT_READY, or UNKNOWN."""
        self.flush()
        self._pump(block=False)
        cached = self._results.get(job_id)
        if cached is not None:
            if isinstance(cached, ServerError):
                if cached.subcode == ErrorCode.NOT_READY:
                    del self._results[job_id]  # retry may succeed later
                    return NOT_READY
                if cached.subcode == ErrorCode.UNKNOWN_JOB:
                    return UNKNOWN
                raise cached
            return cached
        header = MessageHeader(kind=MessageKind.QUERY, job_id=job_id, mode=self.config.mode)
        self._push(header)
        result = self._await_result(job_id, keep=True)
        if isinstance(result, ServerError):
            if result.subcode == ErrorCode.NOT_READY:
                del self._results[job_id]
                return NOT_READY
            if result.subcode == ErrorCode.UNKNOWN_JOB:
                return UNKNOWN
            raise result
        return result

    def stats_for(self, job_id: int) -> RequestStats | None:
        return self._stats.get(job_id)

    # -- internals --------------------------------------------------------------
    def _require_mode(self, mode: Mode) -> None:
        if self.config.mode != mode:
            raise RocketError(f"session is fixed to mode {self.config.mode.name}")

    def _op_code(self, op: str) -> int:
        try:
            return self.ops[op]
        except KeyError:
            # let the server reject it so the error path is exercised end to end
            return 0xFFFF

    def _enqueue(self, op: str, data: bytes, mode: Mode, device, injection,
                 ext: bytes = b"") -> int:
        slot_payload = self.pair.geometry.slot_payload
        if len(data) > slot_payload:
            raise PayloadTooLarge(f"{len(data)} > {slot_payload}")
        job_id = self._next_job_id
        self._next_job_id += 1
        slot = self._take_slot()
        wire_hint = device if device is not None else self.config.device_hint
        ticket = None
        tx_copy_us = 0.0
        if data:
            local = self.config.local_device_hint
            ticket, tx_copy_us = self._stage_payload(
                data, slot, local if local is not None else wire_hint)
        header = MessageHeader(
            kind=MessageKind.REQUEST,
            op_code=self._op_code(op),
            job_id=job_id,
            payload_offset=self.pair.tx_slot_offset(slot) if data else 0,
            payload_len=len(data),
            device_hint=wire_hint,
            injection_hint=injection if injection is not None else self.config.cache_injection,
            mode=mode,
        )
        if ext:
            header.ext = ext
        self._slot_of_job[job_id] = slot
        self._pending.append(_PendingPush(job_id, slot, header, ticket, tx_copy_us, now_ns()))
        self._stats[job_id] = RequestStats(tx_copy_us=tx_copy_us)
        while len(self._stats) > _STATS_CACHE_LIMIT:
            self._stats.pop(next(iter(self._stats)))
        return job_id

    def _stage_payload(self, data: bytes, slot: int, hint) -> tuple[object | None, float]:
        routed = route_device(len(data), self.offload_threshold, hint)
        dst_off = self.pair.tx_slot_offset(slot)
        t0 = now_ns()
        desc = CopyDescriptor(src_buf=data, src_off=0, dst_buf=self.pair.region.buf,
                              dst_off=dst_off, length=len(data))
        if routed == Device.OFFLOAD and self.engine is not None:
            try:
                ticket = self.engine.submit(desc)
                return ticket, (now_ns() - t0) / 1e3
            except QueueFull:
                if hint == DeviceHint.OFFLOAD:
                    while True:
                        try:
                            ticket = self.engine.submit(desc)
                            return ticket, (now_ns() - t0) / 1e3
                        except QueueFull:
                            time.sleep(_PUMP_IDLE_SLEEP_S)
        self.cpu.submit(desc)
        return None, (now_ns() - t0) / 1e3

    def _take_slot(self) -> int:
        while not self._free_slots:
            # every in-flight request holds one tx slot until its response
            # lands; make sure queued requests are visible to the server
            # before blocking on responses
            if self._pending:
                self._push_pending()
            else:
                self._pump(block=True)
        return self._free_slots.pop()

    def _push_pending(self) -> None:
        """Complete staged copies and push headers, preserving request order."""
        if not self._pending:
            return
        pending, self._pending = self._pending, []
        tickets = [p.ticket for p in pending if p.ticket is not None]
        if len(tickets) == 1:
            wait(tickets[0].record, self.policy, est_complete_ns=tickets[0].est_complete_ns)
        elif tickets:
            wait_all(tickets, self.policy)
        for item in pending:
            if item.ticket is not None and \
                    item.ticket.record.status != CompletionStatus.COMPLETE:
                # staging copy faulted: fail the request locally, free the slot
                self._results[item.job_id] = ServerError("staging", ErrorCode.HANDLER_FAILED)
                slot = self._slot_of_job.pop(item.job_id, None)
                if slot is not None:
                    self._free_slots.append(slot)
                continue
            self._push(item.header)

    def flush(self) -> None:
        self._push_pending()

    def _push(self, header: MessageHeader) -> None:
        raw = header.pack()
        while not self.pair.tx_ring.push(raw):
            time.sleep(_PUMP_IDLE_SLEEP_S)  # ring backpressure

    def _await_result(self, job_id: int, keep: bool = False) -> bytes | ServerError:
        while job_id not in self._results:
            self._pump(block=True)
        if keep:
            return self._results[job_id]
        # one-shot consumers take ownership; only queried results stay cached
        result = self._results.pop(job_id)
        self._result_bytes -= self._sizeof(result)
        return result

    @staticmethod
    def _sizeof(outcome) -> int:
        return len(outcome) if not isinstance(outcome, ServerError) else 0

    def _pump(self, block: bool, deadline: float | None = None) -> None:
        """Drain the receive ring, resolving futures and caching results."""
        progressed = False
        while True:
            raw = self.pair.rx_ring.peek()
            if raw is None:
                if progressed or not block:
                    return
                if deadline is not None and time.monotonic() > deadline:
                    return
                time.sleep(_PUMP_IDLE_SLEEP_S)
                continue
            header = MessageHeader.unpack(raw)
            payload: bytes = b""
            if header.kind == MessageKind.RESPONSE and header.payload_len:
                payload = read_bytes(self.pair.region.buf, header.payload_offset,
                                     header.payload_len)
            self.pair.rx_ring.advance()
            progressed = True
            self._deliver(header, payload)

    def _deliver(self, header: MessageHeader, payload: bytes) -> None:
        job_id = header.job_id
        slot = self._slot_of_job.pop(job_id, None)
        if slot is not None:
            self._free_slots.append(slot)

        if header.kind == MessageKind.RESPONSE:
            outcome: bytes | ServerError = payload
            stats = self._stats.get(job_id)
            if stats is not None and len(header.ext) >= 28:
                (stats.copy_in_us, stats.wait_us, stats.exec_us, stats.copy_out_us,
                 stats.queue_us, stats.polls, stats.touches) = transport.unpack_stats_ext(header.ext)
                stats.device_used = header.device_used
        else:
            subcode = transport.unpack_error_ext(header.ext)
            outcome = ServerError(op=f"0x{header.op_code:x}", subcode=subcode)

        future = self._futures.pop(job_id, None)
        if future is not None:
            # the future owns its result; no need to hold it in the cache too
            if isinstance(outcome, ServerError):
                future._resolve(None, outcome)
            else:
                future._resolve(outcome, None)
            return

        if job_id in self._results and not isinstance(self._results[job_id], ServerError):
            return  # stale duplicate (late query reply); keep the real result
        stale = self._results.pop(job_id, None)
        if stale is not None:
            self._result_bytes -= self._sizeof(stale)
        self._results[job_id] = outcome
        self._result_bytes += self._sizeof(outcome)
        # bound the cache by entries and bytes; dict order is insertion order,
        # so eviction walks oldest-first and never touches the newest entry
        while (len(self._results) > _RESULT_CACHE_LIMIT
               or self._result_bytes > _RESULT_CACHE_BYTES) and len(self._results) > 1:
            oldest = next(iter(self._results))
            dropped = self._results.pop(oldest)
            self._result_bytes -= self._sizeof(dropped)

    def _note_e2e(self, job_id: int, t0: int) -> None:
        stats = self._stats.get(job_id)
        if stats is not None:
            stats.e2e_us = (now_ns() - t0) / 1e3


def connect(config: ClientConfig | str) -> ClientSession:
    """Open a session; raises ServerUnavailable or TooManyClients."""
    if isinstance(config, str):
        config = ClientConfig(server_name=config)
    return ClientSession(config)
