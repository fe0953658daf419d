"""Deterministic discrete-event engine and labelled random streams."""

from __future__ import annotations

import enum
import hashlib
import heapq
import os
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from fedsl.errors import SchedulingError, SimulationError, ValidationError


class EventKind(str, enum.Enum):
    COMPUTE_DONE = "ComputeDone"
    UPLINK_DONE = "UplinkDone"
    DOWNLINK_DONE = "DownlinkDone"
    AGGREGATION_DUE = "AggregationDue"
    DISTILL_DUE = "DistillDue"
    EVAL_DUE = "EvalDue"
    TIMEOUT = "Timeout"


@dataclass(order=True)
class Event:
    time_s: float
    seq: int
    kind: EventKind = field(compare=False)
    subject: Any = field(compare=False, default=None)
    payload: Any = field(compare=False, default=None, repr=False)


class RngStream:
    """Philox stream keyed by (root seed, label).

    Philox is counter based, so each draw is a pure function of the key and
    the number of values consumed before it. Adding a new label never shifts
    the values of an existing one.
    """

    def __init__(self, root_seed: int, label: str):
        if not label:
            raise ValidationError("stream label must be non-empty")
        self.root_seed = int(root_seed)
        self.label = label
        digest = hashlib.sha256(f"{self.root_seed}:{label}".encode()).digest()
        key = np.frombuffer(digest[:16], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @property
    def counter(self) -> int:
        return int(self.generator.bit_generator.state["state"]["counter"][0])

    def random(self, size=None):
        return self.generator.random(size)

    def __getattr__(self, name):
        return getattr(self.generator, name)


def rng_stream(root_seed: int, label: str) -> RngStream:
    return RngStream(root_seed, label)


def trace_enabled() -> bool:
    return os.environ.get("FEDSL_TRACE") == "1"


class Engine:
    def __init__(self, seed: int = 0, trace: bool = False):
        self.seed = seed
        self.clock = 0.0
        self._queue: list[Event] = []
        self._seq = 0
        self._streams: dict[str, RngStream] = {}
        self.trace: list[tuple[float, str, Any]] | None = [] if trace else None
        self.processed = 0

    def rng(self, label: str) -> RngStream:
        stream = self._streams.get(label)
        if stream is None:
            stream = self._streams[label] = RngStream(self.seed, label)
        return stream

    def schedule(self, event: Event) -> Event:
        if event.time_s < self.clock:
            raise SchedulingError(
                f"event {event.kind.value} at {event.time_s} is before clock {self.clock}"
            )
        heapq.heappush(self._queue, event)
        return event

    def at(self, time_s: float, kind: EventKind, subject=None, payload=None) -> Event:
        ev = Event(time_s, self._seq, kind, subject, payload)
        self._seq += 1
        return self.schedule(ev)

    def after(self, delay_s: float, kind: EventKind, subject=None, payload=None) -> Event:
        return self.at(self.clock + delay_s, kind, subject, payload)

    def __len__(self):
        return len(self._queue)

    def peek_time(self) -> float | None:
        return self._queue[0].time_s if self._queue else None

    def run_until(
        self,
        handler: Callable[[Event], None],
        time_limit: float | None = None,
        stop: Callable[[], bool] | None = None,
    ) -> float:
        """Pop and handle events in (time, seq) order.

        Stops when the queue is empty, when the next event lies beyond
        ``time_limit``, or when ``stop()`` turns true after an event.
        """
        queue = self._queue
        while queue:
            if time_limit is not None and queue[0].time_s > time_limit:
                break
            ev = heapq.heappop(queue)
            self.clock = ev.time_s
            if self.trace is not None:
                self.trace.append((ev.time_s, ev.kind.value, ev.subject))
            try:
                handler(ev)
            except Exception as exc:
                raise SimulationError(
                    f"handler failed on {ev.kind.value} for {ev.subject!r} at t={ev.time_s}: {exc}",
                    ev,
                ) from exc
            self.processed += 1
            if stop is not None and stop():
                break
        return self.clock

    def dump_trace(self, path) -> None:
        write_trace(self.trace or (), path)


def write_trace(trace, path) -> None:
    """One ``time,kind,subject`` line per handled event."""
    with open(path, "w", newline="\n") as fh:
        for t, kind, subject in trace:
            fh.write(f"{t!r},{kind},{subject}\n")
