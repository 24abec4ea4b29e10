"""A small discrete-event engine: integer-ns clock, events and generator processes."""

from __future__ import annotations

import heapq
from typing import Any, Callable, Generator


class Event:
    __slots__ = ("engine", "callbacks", "value", "triggered")

    def __init__(self, engine: "Engine"):
        self.engine = engine
        self.callbacks: list = []
        self.value: Any = None
        self.triggered = False

    def succeed(self, value: Any = None) -> "Event":
        if self.triggered:
            raise RuntimeError("event already triggered")
        self.triggered = True
        self.value = value
        for cb in self.callbacks:
            self.engine.schedule(0, cb, self)
        self.callbacks = []
        return self

    def on(self, cb: Callable) -> None:
        """Run ``cb(event)`` once this event fires (immediately scheduled if it already has)."""
        if self.triggered:
            self.engine.schedule(0, cb, self)
        else:
            self.callbacks.append(cb)


class Process:
    """Drives a generator that yields events; the process resumes with each event's value."""

    __slots__ = ("engine", "gen", "name", "done", "waiting")

    def __init__(self, engine: "Engine", gen: Generator, name: str):
        self.engine = engine
        self.gen = gen
        self.name = name
        self.done = Event(engine)
        self.waiting: Event | None = None

    def _resume(self, ev: Event | None) -> None:
        value = ev.value if ev is not None else None
        try:
            nxt = self.gen.send(value)
        except StopIteration as stop:
            self.waiting = None
            self.done.succeed(stop.value)
            return
        self.waiting = nxt
        nxt.on(self._resume)


class Engine:
    def __init__(self):
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.processes: list[Process] = []

    def schedule(self, delay: int, fn: Callable, *args) -> None:
        if delay < 0:
            raise ValueError("negative delay")
        self._seq += 1
        heapq.heappush(self._heap, (self.now + int(delay), self._seq, fn, args))

    def event(self) -> Event:
        return Event(self)

    def timeout(self, delay: int, value: Any = None) -> Event:
        ev = Event(self)
        if delay <= 0:
            ev.succeed(value)
        else:
            self.schedule(delay, ev.succeed, value)
        return ev

    def process(self, gen: Generator, name: str = "") -> Process:
        p = Process(self, gen, name)
        self.processes.append(p)
        self.schedule(0, p._resume, None)
        return p

    @property
    def pending(self) -> int:
        return len(self._heap)

    def step(self) -> bool:
        """Run the next scheduled callback; False when nothing is scheduled."""
        if not self._heap:
            return False
        t, _, fn, args = heapq.heappop(self._heap)
        self.now = t
        fn(*args)
        return True

    def run(self, until: int | None = None) -> None:
        heap = self._heap
        while heap:
            if until is not None and heap[0][0] > until:
                self.now = until
                return
            t, _, fn, args = heapq.heappop(heap)
            self.now = t
            fn(*args)

    def halt(self) -> None:
        """Drop everything scheduled; processes still waiting stay unfinished."""
        self._heap.clear()

    def blocked(self) -> list[Process]:
        return [p for p in self.processes if not p.done.triggered]
