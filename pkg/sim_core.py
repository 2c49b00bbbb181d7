"""
Discrete-event engine for the FaaS simulator.
Holds the virtual clock (integer milliseconds), the event heap ordered by
(fire_at, seq), and the named random streams derived from one seed.
"""

import heapq
import itertools
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Set, Tuple

import numpy as np
from loguru import logger


class SchedulingError(RuntimeError):
    """An event was scheduled in the past or has no registered handler."""


class InvariantViolation(RuntimeError):
    """A simulation invariant failed while the engine was running."""


class EventKind(str, Enum):
    INVOCATION_ARRIVAL = "invocation_arrival"
    PHASE_COMPLETE = "phase_complete"
    BENCHMARK_COMPLETE = "benchmark_complete"
    INSTANCE_IDLE_TIMEOUT = "instance_idle_timeout"
    VU_THINK_DONE = "vu_think_done"
    EXPERIMENT_END = "experiment_end"
    THRESHOLD_TICK = "threshold_tick"
    WARMUP_END = "warmup_end"


@dataclass(frozen=True, order=True)
class Event:
    """
    One scheduled occurrence. Ordering uses (fire_at, seq) only; seq is
    unique per engine so the payload is never compared.
    """

    fire_at: int
    seq: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)


@dataclass
class SimClock:
    now: int = 0

    def advance(self, t: int):
        if t < self.now:
            raise InvariantViolation(f"Clock moved backwards: {self.now} -> {t}")
        self.now = t


class RngStreams:
    """
    Independent random streams for one experiment seed.

    Each stochastic concern draws from its own stream so that switching the
    policy on or off does not shift the draws of the platform model.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned value, got {seed}")
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    @staticmethod
    def _label(stream_id: str) -> int:
        # crc32 is stable across interpreters, unlike hash()
        return zlib.crc32(stream_id.encode("utf-8"))

    def stream(self, stream_id: str) -> np.random.Generator:
        """Sequential generator for a concern, created on first use."""
        if stream_id not in self._streams:
            entropy = [self.seed, self._label(stream_id)]
            self._streams[stream_id] = np.random.default_rng(np.random.SeedSequence(entropy))
        return self._streams[stream_id]

    def keyed(self, stream_id: str, *key: int) -> np.random.Generator:
        """Fresh generator addressed by a key, independent of draw order."""
        entropy = [self.seed, self._label(stream_id), *(int(k) for k in key)]
        return np.random.default_rng(np.random.SeedSequence(entropy))


Handler = Callable[[Event], None]


class Engine:
    """
    Single-threaded event loop.

    Handlers are registered per event kind; observers run after every
    processed event (the platform uses one for its conservation check).
    """

    def __init__(self, record_trace: bool = False):
        self.clock = SimClock()
        self._queue: List[Event] = []
        self._seq = itertools.count()
        self._pending: Set[int] = set()
        self._cancelled: Set[int] = set()
        self._handlers: Dict[EventKind, Handler] = {}
        self._observers: List[Handler] = []
        self._last_key: Optional[Tuple[int, int]] = None
        self.processed = 0
        self.trace: Optional[List[Tuple[int, int, str, str]]] = [] if record_trace else None

    @property
    def now(self) -> int:
        return self.clock.now

    def on(self, kind: EventKind, handler: Handler):
        self._handlers[kind] = handler

    def add_observer(self, observer: Handler):
        self._observers.append(observer)

    def schedule(self, fire_at: int, kind: EventKind, payload: Any = None) -> int:
        """Enqueue an event and return its id (the tie-break sequence number)."""
        fire_at = int(fire_at)
        if fire_at < self.clock.now:
            raise SchedulingError(
                f"Cannot schedule {kind.value} at {fire_at}: clock is already at {self.clock.now}"
            )
        event = Event(fire_at, next(self._seq), kind, payload)
        heapq.heappush(self._queue, event)
        self._pending.add(event.seq)
        return event.seq

    def schedule_in(self, delay: int, kind: EventKind, payload: Any = None) -> int:
        return self.schedule(self.clock.now + int(delay), kind, payload)

    def cancel(self, event_id: int) -> bool:
        """Cancel a pending event. Returns False if it already fired or was cancelled."""
        if event_id not in self._pending:
            return False
        self._pending.discard(event_id)
        self._cancelled.add(event_id)
        return True

    def pending_count(self) -> int:
        return len(self._pending)

    def run_until(self, t_end: int) -> int:
        """
        Process every event with fire_at <= t_end in (fire_at, seq) order,
        then leave the clock at t_end. Returns the number of events processed.
        """
        t_end = int(t_end)
        if t_end < self.clock.now:
            raise SchedulingError(f"run_until({t_end}) is before the clock ({self.clock.now})")

        count = 0
        while self._queue and self._queue[0].fire_at <= t_end:
            event = heapq.heappop(self._queue)
            if event.seq in self._cancelled:
                self._cancelled.discard(event.seq)
                continue
            self._pending.discard(event.seq)

            key = (event.fire_at, event.seq)
            if self._last_key is not None and key < self._last_key:
                raise InvariantViolation(f"Event {key} popped after {self._last_key}")
            self._last_key = key
            self.clock.advance(event.fire_at)

            handler = self._handlers.get(event.kind)
            if handler is None:
                raise SchedulingError(f"No handler registered for {event.kind.value}")
            handler(event)
            count += 1

            if self.trace is not None:
                self.trace.append((event.fire_at, event.seq, event.kind.value, repr(event.payload)))
            for observer in self._observers:
                observer(event)

        self.clock.advance(t_end)
        self.processed += count
        logger.debug(f"Engine ran to t={t_end}: {count} events processed")
        return count
