"""Deterministic discrete-event engine.

Virtual time is an integer count of nanoseconds. Events are dispatched in
``(time, seq)`` order where ``seq`` is the insertion counter, so two runs of the
same program produce byte-identical traces.

Host programs (one per rank) are plain generators. They yield :class:`Delay`
to spend host time and :class:`WaitUntil` to block on simulated state; the
engine resumes them when the condition becomes true. Model code signals state
changes with :meth:`Simulator.notify` on a hashable key, which re-evaluates
only the waiters registered on that key.
"""

from __future__ import annotations

import functools
import hashlib
import heapq
import itertools
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable

from .errors import Deadlock, SimulationError


def format_detail(detail: dict) -> str:
    if not detail:
        return "-"
    return ",".join(f"{k}={v}" for k, v in detail.items())


class TraceRecord:
    """One trace line. The ``k=v`` detail string is rendered on first use."""

    __slots__ = ("time", "seq", "entity", "action", "_detail", "_text")

    def __init__(self, time: int, seq: int, entity: str, action: str, detail):
        self.time = time
        self.seq = seq
        self.entity = entity
        self.action = action
        self._detail = detail
        self._text = detail if isinstance(detail, str) else None

    @property
    def detail(self) -> str:
        if self._text is None:
            self._text = format_detail(self._detail)
        return self._text

    def line(self) -> str:
        return f"{self.time} {self.seq} {self.entity} {self.action} {self.detail}"

    def fields(self) -> dict[str, str]:
        if self.detail == "-":
            return {}
        return dict(kv.split("=", 1) for kv in self.detail.split(","))

    def __eq__(self, other):
        return isinstance(other, TraceRecord) and self.line() == other.line()

    def __hash__(self):
        return hash(self.line())

    def __repr__(self):
        return f"TraceRecord({self.line()!r})"


@dataclass(frozen=True)
class BlockedInterval:
    rank: int
    start: int
    end: int
    reason: str

    @property
    def duration(self) -> int:
        return self.end - self.start


# Blocked reasons that belong to the benchmark harness rather than to the
# communication library; they are not charged to host_blocked_ns.
HARNESS_REASONS = frozenset({"barrier"})


def trace_digest(lines: Iterable[str]) -> str:
    h = hashlib.blake2b(digest_size=8)
    first = True
    for line in lines:
        if not first:
            h.update(b"\n")
        h.update(line.encode())
        first = False
    return h.hexdigest()


@dataclass
class SimReport:
    final_time: int
    host_blocked_ns: dict[int, int]
    kernel_launches: int
    triggered_ops_enqueued: int
    max_tops_in_flight: int
    bytes_moved: int
    trace: list[TraceRecord]
    blocked_intervals: list[BlockedInterval] = field(default_factory=list)
    counters: dict[str, int] = field(default_factory=dict)

    @functools.cached_property
    def trace_hash(self) -> str:
        return trace_digest(r.line() for r in self.trace)

    @property
    def total_host_blocked_ns(self) -> int:
        return sum(self.host_blocked_ns.values())

    def trace_text(self) -> str:
        return "\n".join(r.line() for r in self.trace)


@dataclass(frozen=True)
class Delay:
    """Spend ``ns`` of host time. With a ``reason`` the time counts as blocked."""

    ns: int
    reason: str | None = None


@dataclass(frozen=True)
class WaitUntil:
    """Block the host until ``cond()`` holds; re-checked on notify(key)."""

    cond: Callable[[], bool]
    keys: tuple
    reason: str
    label: str = ""


@dataclass
class Event:
    time: int
    seq: int
    entity: str = field(compare=False)
    action: str = field(compare=False)
    fn: Callable | None = field(compare=False, default=None)
    args: tuple = field(compare=False, default=())
    detail: dict = field(compare=False, default_factory=dict)


class _Waiter:
    __slots__ = ("keys", "cond", "callback", "label", "active")

    def __init__(self, keys, cond, callback, label):
        self.keys = keys
        self.cond = cond
        self.callback = callback
        self.label = label
        self.active = True


class _Process:
    __slots__ = ("name", "rank", "gen", "waiting", "done")

    def __init__(self, name, rank, gen):
        self.name = name
        self.rank = rank
        self.gen = gen
        self.waiting: str | None = None
        self.done = False


class Simulator:
    def __init__(self):
        self._queue: list[tuple[int, int, Event]] = []
        self._seq = itertools.count()
        self._trace_seq = itertools.count()
        self._now = 0
        self._last_time = 0
        self._running = False
        self.trace: list[TraceRecord] = []
        self._waiters: dict[Hashable, list[_Waiter]] = defaultdict(list)
        self._procs: list[_Process] = []
        self._probes: list[Callable[[], list[str]]] = []
        self.stats: Counter = Counter()
        self.blocked: list[BlockedInterval] = []
        self.max_tops_in_flight = 0

    # -- time and scheduling -------------------------------------------------

    def now(self) -> int:
        return self._now

    def schedule(self, at: int, entity: str, action: str, fn: Callable | None = None,
                 *args: Any, **detail: Any) -> int:
        """Queue ``fn(*args)`` at virtual time ``at``; returns the event id."""
        at = int(at)
        if at < self._now:
            raise SimulationError(
                f"event {entity}/{action} scheduled at {at} < now {self._now}")
        seq = next(self._seq)
        heapq.heappush(self._queue, (at, seq, Event(at, seq, entity, action, fn, args, detail)))
        return seq

    def after(self, delay: int, entity: str, action: str, fn: Callable | None = None,
              *args: Any, **detail: Any) -> int:
        return self.schedule(self._now + int(delay), entity, action, fn, *args, **detail)

    def record(self, entity: str, action: str, **detail: Any) -> None:
        self.trace.append(TraceRecord(self._now, next(self._trace_seq), entity, action, detail))

    # -- level-triggered waiting ----------------------------------------------

    def watch(self, keys: Iterable[Hashable], cond: Callable[[], bool],
              callback: Callable[[], None], label: str) -> _Waiter:
        """Run ``callback`` (as a fresh event at the current time) once ``cond`` holds.

        The caller is expected to have checked ``cond`` already.
        """
        w = _Waiter(tuple(keys), cond, callback, label)
        for k in w.keys:
            self._waiters[k].append(w)
        return w

    def notify(self, key: Hashable) -> None:
        waiters = self._waiters.get(key)
        if not waiters:
            return
        fired = []
        for w in waiters:
            if w.active and w.cond():
                w.active = False
                fired.append(w)
        if not fired:
            return
        for w in fired:
            for k in w.keys:
                lst = self._waiters[k]
                lst.remove(w)
                if not lst:
                    del self._waiters[k]
            self.schedule(self._now, "sim", "wake", w.callback, label=w.label)

    def add_probe(self, probe: Callable[[], list[str]]) -> None:
        """Register a callable listing entities that are stuck at quiescence."""
        self._probes.append(probe)

    # -- host processes -------------------------------------------------------

    def spawn(self, name: str, rank: int, gen) -> None:
        proc = _Process(name, rank, gen)
        self._procs.append(proc)
        self.schedule(self._now, name, "host_start", self._step, proc, None)

    def _step(self, proc: _Process, value) -> None:
        while True:
            try:
                cmd = proc.gen.send(value)
            except StopIteration:
                proc.done = True
                self.record(proc.name, "host_exit")
                return
            if isinstance(cmd, WaitUntil) and cmd.cond():
                value = 0
                continue
            if isinstance(cmd, Delay) and cmd.ns == 0:
                value = 0
                continue
            break
        if isinstance(cmd, Delay):
            start = self._now
            if cmd.reason is not None:
                self.schedule(start + cmd.ns, proc.name, "block_end", self._end_delay,
                              proc, start, cmd.reason, reason=cmd.reason)
            else:
                self.schedule(start + cmd.ns, proc.name, "host", self._step, proc, None)
        elif isinstance(cmd, WaitUntil):
            start = self._now
            begin, end = _block_actions(cmd.reason)
            self.record(proc.name, begin, reason=cmd.reason, on=cmd.label or "-")
            proc.waiting = cmd.label or cmd.reason

            def wake():
                proc.waiting = None
                self._close_block(proc, start, cmd.reason)
                self.record(proc.name, end, reason=cmd.reason)
                self._step(proc, self._now - start)

            self.watch(cmd.keys, cmd.cond, wake, proc.name)
        else:
            raise SimulationError(f"{proc.name} yielded unsupported command {cmd!r}")

    def _end_delay(self, proc, start, reason):
        self._close_block(proc, start, reason)
        self._step(proc, self._now - start)

    def _close_block(self, proc, start, reason):
        if self._now > start:
            self.blocked.append(BlockedInterval(proc.rank, start, self._now, reason))

    # -- main loop ------------------------------------------------------------

    def run(self) -> SimReport:
        self._running = True
        while self._queue:
            ev = heapq.heappop(self._queue)[2]
            self._now = ev.time
            self._last_time = ev.time
            self.trace.append(TraceRecord(ev.time, next(self._trace_seq), ev.entity,
                                          ev.action, ev.detail))
            if ev.fn is not None:
                ev.fn(*ev.args)
        self._running = False
        stuck = self._stuck_entities()
        if stuck:
            raise Deadlock(stuck)
        return self.report()

    def _stuck_entities(self) -> list[str]:
        stuck = []
        for proc in self._procs:
            if not proc.done:
                stuck.append(f"{proc.name} waiting on {proc.waiting}")
        for probe in self._probes:
            stuck.extend(probe())
        return stuck

    def report(self) -> SimReport:
        per_rank: dict[int, int] = {}
        for proc in self._procs:
            per_rank.setdefault(proc.rank, 0)
        for b in self.blocked:
            if b.reason not in HARNESS_REASONS:
                per_rank[b.rank] = per_rank.get(b.rank, 0) + b.duration
        return SimReport(
            final_time=self._last_time,
            host_blocked_ns=per_rank,
            kernel_launches=self.stats["kernel_launches"],
            triggered_ops_enqueued=self.stats["triggered_ops_enqueued"],
            max_tops_in_flight=self.max_tops_in_flight,
            bytes_moved=self.stats["bytes_moved"],
            trace=self.trace,
            blocked_intervals=list(self.blocked),
            counters=dict(self.stats),
        )


def _block_actions(reason: str) -> tuple[str, str]:
    if reason == "throttle":
        return "throttle_wait_begin", "throttle_wait_end"
    return "block_begin", "block_end"
