"""Monotonic-clock helpers for microsecond-scale waits.

time.sleep() on Linux routinely wakes 50-150 us late (timer slack plus run
queue latency), which is the same order as the copy latencies modeled here.
Waits that must land near a deadline sleep away the bulk of the interval and
spin out the remainder on the monotonic clock. A thread spinning in pure
Python holds the GIL for a full interpreter switch interval, so processes
that poll should call tune_interpreter() once; the default 5 ms interval
would stall the engine worker behind any spinning poller.
"""

from __future__ import annotations

import sys
import time

now_ns = time.perf_counter_ns

# Below this remainder a sleep is pointless: the wakeup error exceeds it.
_SLEEP_FLOOR_NS = 350_000
# How early to come out of the bulk sleep so the spin can absorb the slack.
_SLEEP_MARGIN_NS = 300_000

_SWITCH_INTERVAL_S = 50e-6


def tune_interpreter() -> None:
    """Tighten the GIL switch interval so pollers and workers interleave."""
    if sys.getswitchinterval() > _SWITCH_INTERVAL_S:
        sys.setswitchinterval(_SWITCH_INTERVAL_S)


def spin_until(deadline_ns: int) -> None:
    """Busy-wait on the monotonic clock until deadline_ns. Sub-us precision."""
    while time.perf_counter_ns() < deadline_ns:
        pass


def sleep_until(deadline_ns: int) -> None:
    """Sleep toward deadline_ns, spinning the final stretch for precision."""
    while True:
        remaining = deadline_ns - time.perf_counter_ns()
        if remaining <= 0:
            return
        if remaining > _SLEEP_FLOOR_NS:
            time.sleep((remaining - _SLEEP_MARGIN_NS) / 1e9)
        else:
            spin_until(deadline_ns)
            return


def sleep_coarse_until(deadline_ns: int) -> None:
    """Sleep toward deadline_ns without spinning; may overshoot by ~0.1 ms."""
    remaining = deadline_ns - time.perf_counter_ns()
    while remaining > _SLEEP_FLOOR_NS:
        time.sleep((remaining - _SLEEP_MARGIN_NS) / 1e9)
        remaining = deadline_ns - time.perf_counter_ns()
    if remaining > 0:
        time.sleep(remaining / 1e9)
