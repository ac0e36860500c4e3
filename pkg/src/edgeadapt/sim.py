"""Minimal discrete-event scheduler on virtual time."""
from __future__ import annotations

import heapq
import itertools
from typing import Callable


class Event:
    __slots__ = ("time", "seq", "fn", "args", "cancelled")

    def __init__(self, time, seq, fn, args):
        self.time = time
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def __lt__(self, other: "Event") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


class Simulator:
    """Events at equal times fire in scheduling order."""

    def __init__(self):
        self.now = 0.0
        self._heap: list[Event] = []
        self._seq = itertools.count()

    def at(self, time: float, fn: Callable, *args) -> Event:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        ev = Event(time, next(self._seq), fn, args)
        heapq.heappush(self._heap, ev)
        return ev

    def after(self, delay: float, fn: Callable, *args) -> Event:
        return self.at(self.now + delay, fn, *args)

    @staticmethod
    def cancel(ev: Event | None):
        if ev is not None:
            ev.cancelled = True

    def run(self, until: float):
        while self._heap and self._heap[0].time <= until:
            ev = heapq.heappop(self._heap)
            if ev.cancelled:
                continue
            self.now = ev.time
            ev.fn(*ev.args)
        self.now = max(self.now, until)
