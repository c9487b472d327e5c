"""Virtual time: a settable clock and an ordered event queue.

All simulation time is virtual; nothing in this package reads the wall
clock.  Events firing at the same instant run in scheduling order
(monotonic sequence numbers break ties), which keeps every run a pure
function of its inputs.
"""

from __future__ import annotations

import heapq
import itertools
from typing import Callable


class VirtualClock:
    """Monotonic virtual clock, advanced only by the event loop."""

    def __init__(self, start: float = 0.0) -> None:
        self.now = start

    def advance_to(self, t: float) -> None:
        if t < self.now:
            raise ValueError(f"clock cannot move backwards ({t} < {self.now})")
        self.now = t


class Event:
    """Handle for a scheduled callback; cancellation is lazy."""

    __slots__ = ("fn", "label", "cancelled")

    def __init__(self, fn: Callable[[], None], label: str) -> None:
        self.fn = fn
        self.label = label
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class EventQueue:
    """Heap of (time, seq, event); seq keeps same-instant order stable."""

    def __init__(self, clock: VirtualClock) -> None:
        self.clock = clock
        self._heap: list[tuple[float, int, Event]] = []
        self._seq = itertools.count()
        self.processed = 0

    def schedule(self, at: float, fn: Callable[[], None], label: str = "") -> Event:
        if at < self.clock.now:
            raise ValueError(f"cannot schedule at {at} before now {self.clock.now}")
        ev = Event(fn, label)
        heapq.heappush(self._heap, (at, next(self._seq), ev))
        return ev

    def schedule_after(self, delay: float, fn: Callable[[], None], label: str = "") -> Event:
        return self.schedule(self.clock.now + delay, fn, label)

    def run_until(self, t_end: float) -> None:
        """Fire every pending event with time <= t_end, ending at t_end."""
        while self._heap and self._heap[0][0] <= t_end:
            at, _, ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.clock.advance_to(at)
            self.processed += 1
            ev.fn()
        self.clock.advance_to(t_end)

    def pending(self) -> int:
        return sum(1 for _, _, ev in self._heap if not ev.cancelled)
