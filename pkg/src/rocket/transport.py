"""Shared-memory segments, SPSC rings, and the 64-byte message frame.

Segment naming
--------------
A server called ``s`` owns one control segment ``rocket.s.ctl`` plus one data
segment per client slot, ``rocket.s.c<id>``. All segments are mapped once per
process and reused for the whole session; every page is written during setup
so steady-state traffic takes no soft page faults.

Data segment layout (all offsets 64-byte aligned)::

    [tx ring]  head u64 | pad | tail u64 | pad | capacity x 64 B slots
    [rx ring]  same shape
    [tx payload]  capacity x slot_payload bytes   (client -> server data)
    [rx payload]  capacity x slot_payload bytes   (server -> client data)

Message frame (one ring slot, little-endian, 64 bytes)::

    off  0  magic        u32   0x524F434B
    off  4  version      u8
    off  5  kind         u8    REQUEST / QUERY / RESPONSE / ERROR
    off  6  op_code      u16
    off  8  job_id       u64
    off 16  payload_off  u64   absolute offset into the data segment
    off 24  payload_len  u64
    off 32  flags        u16   device hint / injection hint / mode / device used
    off 34  gen          u16   payload slot generation (stale-read detection)
    off 36  ext          28 B  kind-specific extension, see pack_*_ext below

Counters are monotonic u64s; an aligned 8-byte store is a single memcpy under
CPython, so the consumer observes slot contents no later than the counter
advance (stores are not reordered on the architectures we run on). Each ring
direction is strictly single-producer / single-consumer.
"""

from __future__ import annotations

import ctypes
import fcntl
import logging
import mmap
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import IntEnum
from multiprocessing import resource_tracker, shared_memory

from .errors import (
    CapacityNotPowerOfTwo,
    NameCollision,
    OutOfMemory,
    RegionExhausted,
    ServerUnavailable,
)

log = logging.getLogger(__name__)

PAGE_SIZE = mmap.PAGESIZE
SLOT_BYTES = 64
MAGIC = 0x524F434B
PROTOCOL_VERSION = 1

_HEADER_FMT = "<IBBHQQQHH28s"
assert struct.calcsize(_HEADER_FMT) == SLOT_BYTES

_RING_HEADER_BYTES = 128  # head and tail on separate cache lines


class MessageKind(IntEnum):
    REQUEST = 1
    QUERY = 2
    RESPONSE = 3
    ERROR = 4


class DeviceHint(IntEnum):
    AUTO = 0
    CPU = 1
    OFFLOAD = 2


class InjectionHint(IntEnum):
    DEFAULT = 0
    ON = 1
    OFF = 2


class Mode(IntEnum):
    SYNC = 0
    ASYNC = 1
    PIPELINE = 2


class ErrorCode(IntEnum):
    NONE = 0
    UNKNOWN_OP = 1
    NOT_READY = 2
    UNKNOWN_JOB = 3
    HANDLER_FAILED = 4
    MALFORMED = 5


@dataclass
class MessageHeader:
    """One ring slot's worth of framing; payload stays in the payload range."""

    kind: MessageKind
    op_code: int = 0
    job_id: int = 0
    payload_offset: int = 0
    payload_len: int = 0
    device_hint: DeviceHint = DeviceHint.AUTO
    injection_hint: InjectionHint = InjectionHint.DEFAULT
    mode: Mode = Mode.SYNC
    device_used: int = 0
    gen: int = 0
    ext: bytes = b""

    def pack(self) -> bytes:
        flags = (
            (self.device_hint & 0x3)
            | ((self.injection_hint & 0x3) << 2)
            | ((self.mode & 0x3) << 4)
            | ((self.device_used & 0x3) << 6)
        )
        return struct.pack(
            _HEADER_FMT,
            MAGIC,
            PROTOCOL_VERSION,
            self.kind,
            self.op_code,
            self.job_id,
            self.payload_offset,
            self.payload_len,
            flags,
            self.gen & 0xFFFF,
            self.ext[:28],
        )

    @classmethod
    def unpack(cls, raw: bytes | memoryview) -> "MessageHeader":
        magic, version, kind, op, job, off, length, flags, gen, ext = struct.unpack(
            _HEADER_FMT, raw
        )
        if magic != MAGIC or version != PROTOCOL_VERSION:
            raise ValueError(f"bad frame: magic=0x{magic:08x} version={version}")
        return cls(
            kind=MessageKind(kind),
            op_code=op,
            job_id=job,
            payload_offset=off,
            payload_len=length,
            device_hint=DeviceHint(flags & 0x3),
            injection_hint=InjectionHint((flags >> 2) & 0x3),
            mode=Mode((flags >> 4) & 0x3),
            device_used=(flags >> 6) & 0x3,
            gen=gen,
            ext=ext,
        )


# Extension payloads (28-byte field). A RESPONSE carries the server-side
# stage breakdown; a synthetic REQUEST carries its stage costs; an ERROR
# carries its subcode.
_STATS_EXT_FMT = "<fffffII"
_STAGE_EXT_FMT = "<fff"


def pack_stats_ext(copy_in_us, wait_us, exec_us, copy_out_us, queue_us, polls, touches):
    return struct.pack(
        _STATS_EXT_FMT, copy_in_us, wait_us, exec_us, copy_out_us, queue_us,
        min(polls, 0xFFFFFFFF), min(touches, 0xFFFFFFFF),
    )


def unpack_stats_ext(ext: bytes):
    return struct.unpack_from(_STATS_EXT_FMT, ext)


def pack_stage_ext(pre_us: float, proc_us_per_mb: float, post_us: float) -> bytes:
    return struct.pack(_STAGE_EXT_FMT, pre_us, proc_us_per_mb, post_us)


def unpack_stage_ext(ext: bytes):
    return struct.unpack_from(_STAGE_EXT_FMT, ext)


def pack_error_ext(subcode: ErrorCode) -> bytes:
    return struct.pack("<H", subcode)


def unpack_error_ext(ext: bytes) -> ErrorCode:
    return ErrorCode(struct.unpack_from("<H", ext)[0])


def segment_name(server: str, client_id: int | None = None) -> str:
    if client_id is None:
        return f"rocket.{server}.ctl"
    return f"rocket.{server}.c{client_id}"


def _attach_untracked(name: str) -> shared_memory.SharedMemory:
    # Attaching registers the segment with the resource tracker, whose
    # cleanup would unlink it when the attaching interpreter exits, yanking
    # the segment out from under the server. Ownership is explicit here
    # (creators unlink in stop()), so suppress registration for attaches.
    orig_register = resource_tracker.register
    resource_tracker.register = lambda *args, **kwargs: None
    try:
        return shared_memory.SharedMemory(name=name)
    finally:
        resource_tracker.register = orig_register


@dataclass
class SharedRegion:
    """A named, mapped, prefaulted shared-memory segment."""

    name: str
    length: int
    shm: shared_memory.SharedMemory
    pinned: bool = False
    prefaulted: bool = False
    owner: bool = False

    @property
    def buf(self) -> memoryview:
        return self.shm.buf

    def close(self) -> None:
        try:
            self.shm.close()
        except Exception:
            pass

    def unlink(self) -> None:
        try:
            self.shm.unlink()
        except FileNotFoundError:
            pass


def _prefault(buf: memoryview, length: int) -> None:
    for off in range(0, length, PAGE_SIZE):
        buf[off] = 0


def _prefault_existing(buf: memoryview, length: int) -> None:
    # Page tables are per process: an attacher faults on first touch even if
    # the creator prefaulted. Rewriting each page's first byte with itself
    # populates writable PTEs; only safe while the segment is quiescent for
    # this attacher (attach happens before any traffic flows).
    for off in range(0, length, PAGE_SIZE):
        buf[off] = buf[off]


def _try_pin(buf: memoryview, length: int) -> bool:
    try:
        libc = ctypes.CDLL(None, use_errno=True)
        addr = ctypes.addressof(ctypes.c_char.from_buffer(buf))
        if libc.mlock(ctypes.c_void_p(addr), ctypes.c_size_t(length)) == 0:
            return True
        log.warning("mlock denied (errno %d); running prefault-only", ctypes.get_errno())
    except Exception as exc:
        log.warning("mlock unavailable (%s); running prefault-only", exc)
    return False


def create_region(name: str, length: int, pin: bool = False) -> SharedRegion:
    """Create, map, zero and prefault a named segment; optionally pin it.

    The length is rounded up to a whole number of pages. Pinning failure is
    non-fatal: the region degrades to prefault-only with a logged warning.
    """
    if length <= 0:
        raise ValueError("length must be positive")
    length = (length + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE
    try:
        shm = shared_memory.SharedMemory(name=name, create=True, size=length)
    except FileExistsError as exc:
        raise NameCollision(name) from exc
    except OSError as exc:
        raise OutOfMemory(f"{name}: {exc}") from exc
    region = SharedRegion(name=name, length=length, shm=shm, owner=True)
    _prefault(region.buf, length)
    region.prefaulted = True
    if pin:
        region.pinned = _try_pin(region.buf, length)
    return region


def attach_region(name: str, prefault: bool = True) -> SharedRegion:
    """Map an existing segment created by another process."""
    try:
        shm = _attach_untracked(name)
    except FileNotFoundError as exc:
        raise ServerUnavailable(name) from exc
    region = SharedRegion(name=name, length=shm.size, shm=shm)
    if prefault:
        _prefault_existing(region.buf, region.length)
        region.prefaulted = True
    return region


def unlink_region(name: str) -> bool:
    """Remove a (possibly stale) segment by name. Returns True if one existed.

    The segment was never registered by this process, so the tracker must
    not see the matching unregister either.
    """
    try:
        shm = _attach_untracked(name)
    except FileNotFoundError:
        return False
    shm.close()
    orig_unregister = resource_tracker.unregister
    resource_tracker.unregister = lambda *args, **kwargs: None
    try:
        shm.unlink()
    except FileNotFoundError:
        pass
    finally:
        resource_tracker.unregister = orig_unregister
    return True


class RingQueue:
    """SPSC ring of fixed 64-byte slots over a region window.

    head counts pushes, tail counts pops; both only ever grow. The producer
    writes the slot before advancing head; the consumer reads the slot before
    advancing tail. 0 <= head - tail <= capacity at every observable point.

    Each side keeps a local copy of the counter it owns and never trusts the
    shared cell for it. Samples of the peer's counter are validated against
    the invariant above and re-read when impossible: shared mappings have
    been observed to return transient zero pages under memory pressure on
    some hosts, and one bogus head sample would otherwise let the consumer
    drain a whole lap of stale slots.
    """

    __slots__ = ("buf", "base", "capacity", "_slots_off", "_head_seen", "_tail_seen")

    def __init__(self, buf: memoryview, base: int, capacity: int):
        if capacity < 1 or capacity & (capacity - 1):
            raise CapacityNotPowerOfTwo(str(capacity))
        self.buf = buf
        self.base = base
        self.capacity = capacity
        self._slots_off = base + _RING_HEADER_BYTES
        self._head_seen = struct.unpack_from("<Q", buf, base)[0]
        self._tail_seen = struct.unpack_from("<Q", buf, base + 64)[0]

    @staticmethod
    def region_bytes(capacity: int) -> int:
        return _RING_HEADER_BYTES + capacity * SLOT_BYTES

    @property
    def head(self) -> int:
        return struct.unpack_from("<Q", self.buf, self.base)[0]

    @property
    def tail(self) -> int:
        return struct.unpack_from("<Q", self.buf, self.base + 64)[0]

    def __len__(self) -> int:
        # tail first: it only grows, so the difference never reads negative
        tail = self.tail
        return self.head - tail

    def reset(self) -> None:
        struct.pack_into("<Q", self.buf, self.base, 0)
        struct.pack_into("<Q", self.buf, self.base + 64, 0)
        self._head_seen = 0
        self._tail_seen = 0

    def _sample_tail(self) -> int:
        """Producer-side view of the consumer's counter, anomaly-filtered."""
        lo, hi = self._tail_seen, self._head_seen
        for _ in range(8):
            sample = struct.unpack_from("<Q", self.buf, self.base + 64)[0]
            if lo <= sample <= hi:
                self._tail_seen = sample
                return sample
        return lo

    def _sample_head(self) -> int:
        """Consumer-side view of the producer's counter, anomaly-filtered."""
        lo = max(self._head_seen, self._tail_seen)
        hi = self._tail_seen + self.capacity
        for _ in range(8):
            sample = struct.unpack_from("<Q", self.buf, self.base)[0]
            if lo <= sample <= hi:
                self._head_seen = sample
                return sample
        return lo

    def push(self, record: bytes) -> bool:
        """Producer side. Returns False (ring full) without blocking."""
        head = self._head_seen
        if head - self._tail_seen >= self.capacity and \
                head - self._sample_tail() >= self.capacity:
            return False
        off = self._slots_off + (head % self.capacity) * SLOT_BYTES
        self.buf[off:off + SLOT_BYTES] = record
        struct.pack_into("<Q", self.buf, self.base, head + 1)
        self._head_seen = head + 1
        return True

    def peek(self) -> bytes | None:
        """Consumer side: next record without consuming it."""
        tail = self._tail_seen
        if self._head_seen <= tail and self._sample_head() <= tail:
            return None
        off = self._slots_off + (tail % self.capacity) * SLOT_BYTES
        return bytes(self.buf[off:off + SLOT_BYTES])

    def advance(self) -> None:
        tail = self._tail_seen
        struct.pack_into("<Q", self.buf, self.base + 64, tail + 1)
        self._tail_seen = tail + 1

    def pop(self) -> bytes | None:
        """Consumer side. Returns None when empty."""
        rec = self.peek()
        if rec is not None:
            self.advance()
        return rec


@dataclass
class PairGeometry:
    """Byte layout of one client's data segment."""

    capacity: int
    slot_payload: int
    tx_ring_off: int = 0
    rx_ring_off: int = field(init=False)
    tx_payload_off: int = field(init=False)
    rx_payload_off: int = field(init=False)
    total_bytes: int = field(init=False)

    def __post_init__(self):
        ring = RingQueue.region_bytes(self.capacity)
        self.rx_ring_off = self.tx_ring_off + ring
        self.tx_payload_off = self.rx_ring_off + ring
        self.rx_payload_off = self.tx_payload_off + self.capacity * self.slot_payload
        self.total_bytes = self.rx_payload_off + self.capacity * self.slot_payload


def pair_geometry(capacity: int, payload_bytes: int) -> PairGeometry:
    """Carve a per-direction payload pool into capacity 64B-aligned slots."""
    if capacity < 1 or capacity & (capacity - 1):
        raise CapacityNotPowerOfTwo(str(capacity))
    slot = (payload_bytes // capacity) & ~63
    if slot < 64:
        raise ValueError("payload pool too small for this capacity")
    return PairGeometry(capacity=capacity, slot_payload=slot)


@dataclass
class QueuePair:
    """A client's persistent transmit/receive rings plus payload ranges."""

    client_id: int
    region: SharedRegion
    geometry: PairGeometry
    tx_ring: RingQueue
    rx_ring: RingQueue

    def tx_slot(self, index: int) -> memoryview:
        g = self.geometry
        off = g.tx_payload_off + (index % g.capacity) * g.slot_payload
        return self.region.buf[off:off + g.slot_payload]

    def rx_slot(self, index: int) -> memoryview:
        g = self.geometry
        off = g.rx_payload_off + (index % g.capacity) * g.slot_payload
        return self.region.buf[off:off + g.slot_payload]

    def tx_slot_offset(self, index: int) -> int:
        g = self.geometry
        return g.tx_payload_off + (index % g.capacity) * g.slot_payload

    def rx_slot_offset(self, index: int) -> int:
        g = self.geometry
        return g.rx_payload_off + (index % g.capacity) * g.slot_payload

    def payload_ranges(self) -> list[tuple[str, int, int]]:
        g = self.geometry
        pool = g.capacity * g.slot_payload
        return [
            (self.region.name, g.tx_payload_off, pool),
            (self.region.name, g.rx_payload_off, pool),
        ]

    def close(self) -> None:
        self.region.close()


def _wrap_pair(client_id: int, region: SharedRegion, geo: PairGeometry) -> QueuePair:
    tx = RingQueue(region.buf, geo.tx_ring_off, geo.capacity)
    rx = RingQueue(region.buf, geo.rx_ring_off, geo.capacity)
    return QueuePair(client_id=client_id, region=region, geometry=geo, tx_ring=tx, rx_ring=rx)


# ---------------------------------------------------------------------------
# Control segment
# ---------------------------------------------------------------------------
#
#   off   0  magic u32 | version u32
#   off   8  active_clients u32 | max_clients u32
#   off  16  ring_capacity u32 | device u32 (0 cpu, 1 sim)
#   off  24  payload_bytes_per_client u64
#   off  32  offload_threshold u64
#   off  40  batch_max u32 | reserved u32
#   off  48  l_fixed_us f64 | alpha_us_per_mb f64
#   off  64  op table: count u32, then 64 x (op_code u16, name 30s)
#   off 2116 -> 2176 (aligned): client slots, 64 B each:
#              state u32 (0 free, 1 active) | generation u32 | pid u64

_CTL_OPS_OFF = 64
_CTL_OP_ENTRY = 32
_CTL_MAX_OPS = 64
_CTL_SLOTS_OFF = 2176
_CTL_SLOT_BYTES = 64


class ControlBlock:
    """Typed accessor over the server control segment."""

    def __init__(self, region: SharedRegion):
        self.region = region
        self.buf = region.buf

    # -- setup (server side) -------------------------------------------------
    def initialize(self, *, max_clients: int, ring_capacity: int, device: int,
                   payload_bytes: int, offload_threshold: int, batch_max: int,
                   l_fixed_us: float, alpha_us_per_mb: float) -> None:
        struct.pack_into("<IIIIII", self.buf, 0, MAGIC, PROTOCOL_VERSION,
                         0, max_clients, ring_capacity, device)
        struct.pack_into("<QQ", self.buf, 24, payload_bytes, offload_threshold)
        struct.pack_into("<II", self.buf, 40, batch_max, 0)
        struct.pack_into("<dd", self.buf, 48, l_fixed_us, alpha_us_per_mb)
        struct.pack_into("<I", self.buf, _CTL_OPS_OFF, 0)
        for slot in range(max_clients):
            struct.pack_into("<IIQ", self.buf, _CTL_SLOTS_OFF + slot * _CTL_SLOT_BYTES, 0, 0, 0)

    @staticmethod
    def required_bytes(max_clients: int) -> int:
        return _CTL_SLOTS_OFF + max_clients * _CTL_SLOT_BYTES

    def validate(self) -> None:
        magic, version = struct.unpack_from("<II", self.buf, 0)
        if magic != MAGIC or version != PROTOCOL_VERSION:
            raise ServerUnavailable("control segment has wrong magic/version")

    # -- published config ----------------------------------------------------
    @property
    def max_clients(self) -> int:
        return struct.unpack_from("<I", self.buf, 12)[0]

    @property
    def ring_capacity(self) -> int:
        return struct.unpack_from("<I", self.buf, 16)[0]

    @property
    def device(self) -> int:
        return struct.unpack_from("<I", self.buf, 20)[0]

    @property
    def payload_bytes(self) -> int:
        return struct.unpack_from("<Q", self.buf, 24)[0]

    @property
    def offload_threshold(self) -> int:
        return struct.unpack_from("<Q", self.buf, 32)[0]

    @property
    def batch_max(self) -> int:
        return struct.unpack_from("<I", self.buf, 40)[0]

    @property
    def latency_model(self) -> tuple[float, float]:
        return struct.unpack_from("<dd", self.buf, 48)

    # -- active client counter ------------------------------------------------
    @property
    def active_clients(self) -> int:
        return struct.unpack_from("<I", self.buf, 8)[0]

    def _set_active(self, n: int) -> None:
        struct.pack_into("<I", self.buf, 8, n)

    # -- op table --------------------------------------------------------------
    def publish_ops(self, ops: dict[str, int]) -> None:
        if len(ops) > _CTL_MAX_OPS:
            raise ValueError("op table overflow")
        struct.pack_into("<I", self.buf, _CTL_OPS_OFF, len(ops))
        for i, (name, code) in enumerate(sorted(ops.items(), key=lambda kv: kv[1])):
            raw = name.encode()[:30].ljust(30, b"\0")
            struct.pack_into("<H30s", self.buf, _CTL_OPS_OFF + 4 + i * _CTL_OP_ENTRY, code, raw)

    def read_ops(self) -> dict[str, int]:
        count = struct.unpack_from("<I", self.buf, _CTL_OPS_OFF)[0]
        ops = {}
        for i in range(count):
            code, raw = struct.unpack_from("<H30s", self.buf, _CTL_OPS_OFF + 4 + i * _CTL_OP_ENTRY)
            ops[raw.rstrip(b"\0").decode()] = code
        return ops

    # -- client slots (mutate only under the connect lock) ---------------------
    def slot_state(self, slot: int) -> int:
        return struct.unpack_from("<I", self.buf, _CTL_SLOTS_OFF + slot * _CTL_SLOT_BYTES)[0]

    def claim_slot(self, pid: int) -> int | None:
        for slot in range(self.max_clients):
            off = _CTL_SLOTS_OFF + slot * _CTL_SLOT_BYTES
            state, gen = struct.unpack_from("<II", self.buf, off)
            if state == 0:
                struct.pack_into("<IIQ", self.buf, off, 1, gen + 1, pid)
                self._set_active(self.active_clients + 1)
                return slot
        return None

    def release_slot(self, slot: int) -> None:
        off = _CTL_SLOTS_OFF + slot * _CTL_SLOT_BYTES
        if struct.unpack_from("<I", self.buf, off)[0] == 1:
            struct.pack_into("<I", self.buf, off, 0)
            self._set_active(max(0, self.active_clients - 1))


@contextmanager
def connect_lock(server: str):
    """File lock guarding control-segment slot claims (setup path only)."""
    path = os.path.join(tempfile.gettempdir(), f"rocket.{server}.lock")
    fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o600)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def create_control(server: str, max_clients: int) -> tuple[SharedRegion, ControlBlock]:
    region = create_region(segment_name(server), ControlBlock.required_bytes(max_clients))
    return region, ControlBlock(region)


def attach_control(server: str) -> tuple[SharedRegion, ControlBlock]:
    region = attach_region(segment_name(server))
    ctl = ControlBlock(region)
    ctl.validate()
    return region, ctl


def open_queue_pair(server: str, client_id: int, ring_capacity: int,
                    payload_bytes: int, *, control: ControlBlock | None = None,
                    pin: bool = False) -> QueuePair:
    """Server side: allocate and initialize one client's queue pair.

    Both rings come up empty and the payload pool is carved into
    64-byte-aligned per-slot ranges, prefaulted along with the rest of the
    segment. payload_bytes is the per-direction pool size.
    """
    geo = pair_geometry(ring_capacity, payload_bytes)
    if control is not None:
        if client_id >= control.max_clients:
            raise RegionExhausted(f"client {client_id} exceeds pool of {control.max_clients}")
    region = create_region(segment_name(server, client_id), geo.total_bytes, pin=pin)
    pair = _wrap_pair(client_id, region, geo)
    pair.tx_ring.reset()
    pair.rx_ring.reset()
    return pair


def attach_queue_pair(server: str, client_id: int, ring_capacity: int,
                      payload_bytes: int) -> QueuePair:
    """Client side: map the pair segment the server allocated for this slot."""
    geo = pair_geometry(ring_capacity, payload_bytes)
    region = attach_region(segment_name(server, client_id))
    if region.length < geo.total_bytes:
        region.close()
        raise ServerUnavailable("pair segment smaller than the advertised geometry")
    return _wrap_pair(client_id, region, geo)


def unlink_server_segments(server: str, max_clients: int = 64) -> int:
    """Remove any stale segments left by a previous run. Returns count removed."""
    removed = 0
    if unlink_region(segment_name(server)):
        removed += 1
    for cid in range(max_clients):
        if unlink_region(segment_name(server, cid)):
            removed += 1
    return removed
