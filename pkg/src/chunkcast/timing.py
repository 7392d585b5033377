"""Wall-clock padding used to emulate modeled device costs."""

from __future__ import annotations

import sys
import time
from contextlib import contextmanager

_SLEEP_SLACK = 4e-3


def pad_until(deadline: float) -> None:
    """Block until ``time.perf_counter() >= deadline``.

    Sleeps for the bulk of the wait and spins for the last few milliseconds (OS sleep overshoot
    is several ms on busy hosts), so
    the overshoot stays well under a millisecond.
    """
    remaining = deadline - time.perf_counter()
    if remaining > _SLEEP_SLACK:
        time.sleep(remaining - _SLEEP_SLACK)
    while time.perf_counter() < deadline:
        time.sleep(0)  # yield the GIL to the other stage


@contextmanager
def fine_switch_interval(seconds: float = 2e-4):
    """Shorten the interpreter's thread switch interval so stage hand-offs are prompt."""
    prev = sys.getswitchinterval()
    sys.setswitchinterval(seconds)
    try:
        yield
    finally:
        sys.setswitchinterval(prev)


def pad_to_cost(start: float, cost_ms: float) -> float:
    """Pad so that at least ``cost_ms`` elapsed since ``start``; returns the end time."""
    if cost_ms > 0:
        pad_until(start + cost_ms / 1000.0)
    return time.perf_counter()
