"""Completion waiting strategies and the latency-model profiler.

Four ways to find out a copy finished:

* BUSY    - spin-read the status flag; lowest detection latency, burns a core.
* LAZY    - read, then sleep a full period (default 100 us) and repeat.
* PASSIVE - read, then a bounded low-activity wait of at most 25 us per round
            (portable stand-in for a user-mode monitor/wait instruction,
            which cannot hold the core longer than that).
* HYBRID  - sleep away a deferral_factor fraction of the size-predicted
            latency, then PASSIVE rounds, then back off to coarse polling.

HYBRID's deferral uses an absolute deadline anchored at submission time, so
a caller that did useful work before waiting does not defer twice.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import IntEnum

from .engine import (
    MB,
    CompletionRecord,
    CompletionStatus,
    CopyBackend,
    CopyDescriptor,
    EngineProfile,
)
from .errors import InsufficientSamples, NegativeFit
from .timing import now_ns, spin_until

log = logging.getLogger(__name__)

_PASSIVE_ROUNDS_BEFORE_FALLBACK = 4
# Back-off poll period once passive rounds are exhausted. Plays the role of
# yield-based polling: on this class of host a bare scheduler yield costs a
# comparable amount anyway, and a timed sleep frees the core deterministically.
_FALLBACK_PERIOD_US = 500.0
# Past this much beyond the estimate, skip passive spinning entirely.
_OVERDUE_GRACE_NS = 200_000


class PollKind(IntEnum):
    BUSY = 0
    LAZY = 1
    PASSIVE = 2
    HYBRID = 3


@dataclass
class PollPolicy:
    kind: PollKind = PollKind.HYBRID
    lazy_period_us: float = 100.0
    passive_cap_us: float = 25.0
    deferral_factor: float = 0.95

    def __post_init__(self):
        if not 0 < self.passive_cap_us <= 25.0:
            raise ValueError("passive_cap_us must be in (0, 25]")
        if not 0 < self.deferral_factor < 1:
            raise ValueError("deferral_factor must be in (0, 1)")
        if self.lazy_period_us <= 0:
            raise ValueError("lazy_period_us must be positive")


@dataclass
class WaitStats:
    polls: int
    waited_us: float
    outcome: CompletionStatus


@dataclass
class CalibrationSample:
    size_mb: float
    latency_us: float

    def __post_init__(self):
        if self.size_mb <= 0 or self.latency_us <= 0:
            raise ValueError("samples must be positive")


def estimate_latency(profile: EngineProfile, size_bytes: int) -> float:
    """Predicted copy latency in microseconds; affine in the transfer size."""
    return profile.l_fixed_us + profile.alpha_us_per_mb * (size_bytes / MB)


def _timed_out(t0: int, timeout_us: float | None) -> bool:
    return timeout_us is not None and (now_ns() - t0) / 1e3 >= timeout_us


def wait(record: CompletionRecord, policy: PollPolicy,
         profile: EngineProfile | None = None, size: int = 0, *,
         est_complete_ns: int | None = None,
         timeout_us: float | None = None) -> WaitStats:
    """Block until the record leaves PENDING, per the chosen policy.

    polls counts status reads. For HYBRID the deferral deadline comes from
    est_complete_ns when the submitter's ticket provides one (it accounts
    for engine queueing), falling back to submit_ts + estimate_latency.
    With a timeout, returns outcome PENDING once it expires.
    """
    t0 = now_ns()
    polls = 1
    if record.status != CompletionStatus.PENDING:
        return WaitStats(polls, (now_ns() - t0) / 1e3, CompletionStatus(record.status))

    kind = policy.kind
    if kind == PollKind.BUSY:
        while record.status == CompletionStatus.PENDING:
            polls += 1
            if _timed_out(t0, timeout_us):
                break

    elif kind == PollKind.LAZY:
        period_ns = int(policy.lazy_period_us * 1e3)
        wake = t0
        while record.status == CompletionStatus.PENDING:
            if _timed_out(t0, timeout_us):
                break
            wake += period_ns
            spin_until(wake)  # absolute schedule keeps rounds exactly one period apart
            polls += 1

    elif kind == PollKind.PASSIVE:
        cap_ns = int(policy.passive_cap_us * 1e3)
        while record.status == CompletionStatus.PENDING:
            if _timed_out(t0, timeout_us):
                break
            spin_until(now_ns() + cap_ns)
            polls += 1

    else:  # HYBRID
        if est_complete_ns is None:
            if profile is None:
                raise ValueError("HYBRID wait needs a profile or est_complete_ns")
            est_complete_ns = record.submit_ts_ns + int(estimate_latency(profile, size) * 1e3)
        span = est_complete_ns - record.submit_ts_ns
        deferral_deadline = record.submit_ts_ns + int(policy.deferral_factor * span)
        remaining = deferral_deadline - now_ns()
        if remaining > 0:
            time.sleep(remaining / 1e9)
        cap_ns = int(policy.passive_cap_us * 1e3)
        rounds = 0
        while True:
            polls += 1
            if record.status != CompletionStatus.PENDING or _timed_out(t0, timeout_us):
                break
            if rounds < _PASSIVE_ROUNDS_BEFORE_FALLBACK and now_ns() < est_complete_ns + _OVERDUE_GRACE_NS:
                spin_until(now_ns() + cap_ns)
            else:
                # the estimate is long blown (engine running behind its
                # model); stop burning the core it needs and back off
                time.sleep(_FALLBACK_PERIOD_US / 1e6)
            rounds += 1

    return WaitStats(polls, (now_ns() - t0) / 1e3, CompletionStatus(record.status))


def wait_all(tickets, policy: PollPolicy, timeout_us: float | None = None) -> WaitStats:
    """Collective wait over a batch of tickets.

    One deferral sleep sized by the largest outstanding completion estimate,
    then per-record passive checks in submission order. Poll totals cover the
    whole batch, which is where batching amortizes the per-copy overhead.
    """
    t0 = now_ns()
    tickets = list(tickets)
    if not tickets:
        return WaitStats(0, 0.0, CompletionStatus.COMPLETE)
    latest = max(
        t.record.submit_ts_ns + int(policy.deferral_factor * (t.est_complete_ns - t.record.submit_ts_ns))
        for t in tickets
    )
    remaining = latest - now_ns()
    if remaining > 0:
        time.sleep(remaining / 1e9)
    polls = 0
    cap_ns = int(policy.passive_cap_us * 1e3)
    outcome = CompletionStatus.COMPLETE
    for ticket in tickets:
        rounds = 0
        while True:
            polls += 1
            status = ticket.record.status
            if status != CompletionStatus.PENDING:
                if status == CompletionStatus.FAULTED:
                    outcome = CompletionStatus.FAULTED
                break
            if _timed_out(t0, timeout_us):
                outcome = CompletionStatus.PENDING
                break
            if rounds < _PASSIVE_ROUNDS_BEFORE_FALLBACK and \
                    now_ns() < ticket.est_complete_ns + _OVERDUE_GRACE_NS:
                spin_until(now_ns() + cap_ns)
            else:
                time.sleep(_FALLBACK_PERIOD_US / 1e6)
            rounds += 1
        if outcome == CompletionStatus.PENDING:
            break
    return WaitStats(polls, (now_ns() - t0) / 1e3, outcome)


def fit_latency_model(samples: list[CalibrationSample]) -> tuple[float, float, float]:
    """Least-squares affine fit latency = l_fixed + alpha * size_mb.

    Returns (l_fixed_us, alpha_us_per_mb, relative_residual). Raises
    InsufficientSamples on a rank-deficient size axis and NegativeFit when
    the fit leaves the physically meaningful quadrant.
    """
    if len({s.size_mb for s in samples}) < 2:
        raise InsufficientSamples("need at least two distinct sizes to fit a line")
    n = len(samples)
    sx = sum(s.size_mb for s in samples)
    sy = sum(s.latency_us for s in samples)
    sxx = sum(s.size_mb * s.size_mb for s in samples)
    sxy = sum(s.size_mb * s.latency_us for s in samples)
    denom = n * sxx - sx * sx
    if denom == 0:
        raise InsufficientSamples("size axis has zero variance")
    alpha = (n * sxy - sx * sy) / denom
    l_fixed = (sy - alpha * sx) / n
    if l_fixed <= 0 or alpha <= 0:
        raise NegativeFit(f"l_fixed={l_fixed:.3f} alpha={alpha:.3f}; widen the size range")
    ss_res = sum((s.latency_us - (l_fixed + alpha * s.size_mb)) ** 2 for s in samples)
    mean_y = sy / n
    ss_tot = sum((s.latency_us - mean_y) ** 2 for s in samples) or 1.0
    return l_fixed, alpha, (ss_res / ss_tot) ** 0.5


def calibrate(backend: CopyBackend, sizes: list[int], reps: int) -> EngineProfile:
    """Derive the latency model by timing real copies on prefaulted buffers.

    Runs reps copies per size, takes per-size medians (robust to scheduler
    outliers), and fits the affine model. Timing uses the engine-reported
    completion stamps, the same signal a deferral wait must predict.
    """
    distinct = sorted(set(sizes))
    if len(distinct) < 4:
        raise InsufficientSamples(f"need >= 4 distinct sizes, got {len(distinct)}")
    if reps < 3:
        raise InsufficientSamples(f"need >= 3 reps, got {reps}")
    largest = max(distinct)
    src = bytearray(largest)
    dst = bytearray(largest)
    for off in range(0, largest, 4096):  # prefault both working buffers
        src[off] = 1
        dst[off] = 1

    samples: list[CalibrationSample] = []
    for size in distinct:
        lats = []
        for _ in range(reps):
            desc = CopyDescriptor(src_buf=src, src_off=0, dst_buf=dst, dst_off=0, length=size)
            ticket = backend.submit(desc)
            while ticket.record.status == CompletionStatus.PENDING:
                pass
            rec = ticket.record
            lats.append((rec.complete_ts_ns - rec.submit_ts_ns) / 1e3)
        samples.append(CalibrationSample(size_mb=size / MB, latency_us=statistics.median(lats)))

    l_fixed, alpha, residual = fit_latency_model(samples)
    log.info("calibrated l_fixed=%.2f us alpha=%.2f us/MB (rel residual %.4f)",
             l_fixed, alpha, residual)
    return EngineProfile(
        l_fixed_us=l_fixed,
        alpha_us_per_mb=alpha,
        calibrated_at=datetime.now(timezone.utc),
        sample_count=len(distinct) * reps,
    )
