"""GPU devices, device memory and in-order stream execution.

A :class:`GpuTask` is one kernel launch. It carries an ordered list of
primitive operations; an independent kernel has exactly one, a merged kernel
aggregates many so that the launch cost is paid once.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .costs import CostModel
from .errors import ConfigError, SimulationError
from .simcore import Delay, Simulator, WaitUntil


class Buf(NamedTuple):
    """A contiguous byte range inside one rank's device region."""

    rank: int
    region: str
    offset: int
    nbytes: int


@dataclass
class FaultPlan:
    """Deliberate faults used by the fault-injection tests.

    ``drop_signal_to`` drops the ``drop_signal_nth`` (0-based) signal delivered
    to that rank. ``misroute_puts_from`` shifts every put issued by that rank
    one byte past its intended target offset.
    """

    drop_signal_to: int | None = None
    drop_signal_nth: int = 0
    misroute_puts_from: int | None = None
    _seen: int = 0

    def drop(self, dst_rank: int) -> bool:
        if self.drop_signal_to is None or dst_rank != self.drop_signal_to:
            return False
        hit = self._seen == self.drop_signal_nth
        self._seen += 1
        return hit


class DeviceMemory:
    """Per-rank byte regions and monotone signal slots."""

    def __init__(self, sim: Simulator, nranks: int, faults: FaultPlan | None = None):
        self.sim = sim
        self.nranks = nranks
        self.faults = faults or FaultPlan()
        self.regions: list[dict[str, np.ndarray]] = [{} for _ in range(nranks)]
        self.slots: list[dict] = [{} for _ in range(nranks)]

    def alloc(self, rank: int, name: str, nbytes: int) -> np.ndarray:
        if name in self.regions[rank]:
            raise SimulationError(f"region {name} already exists on rank {rank}")
        arr = np.zeros(nbytes, dtype=np.uint8)
        self.regions[rank][name] = arr
        return arr

    def region(self, rank: int, name: str) -> np.ndarray:
        return self.regions[rank][name]

    def _view(self, buf: Buf) -> np.ndarray:
        arr = self.regions[buf.rank].get(buf.region)
        if arr is None:
            raise SimulationError(f"no region {buf.region} on rank {buf.rank}")
        if buf.offset < 0 or buf.offset + buf.nbytes > arr.size:
            raise SimulationError(f"{buf} out of bounds (region size {arr.size})")
        return arr[buf.offset:buf.offset + buf.nbytes]

    def read(self, buf: Buf) -> bytes:
        return self._view(buf).tobytes()

    def write(self, buf: Buf, data: bytes) -> None:
        view = self._view(buf)
        if len(data) != view.size:
            raise SimulationError(f"write of {len(data)} bytes into {buf}")
        view[:] = np.frombuffer(data, dtype=np.uint8)

    # -- signal slots ---------------------------------------------------------

    def add_slot(self, rank: int, slot) -> None:
        self.slots[rank].setdefault(slot, 0)

    def has_slot(self, rank: int, slot) -> bool:
        return slot in self.slots[rank]

    def slot(self, rank: int, slot) -> int:
        try:
            return self.slots[rank][slot]
        except KeyError:
            raise SimulationError(f"no signal slot {slot} on rank {rank}") from None

    def store_slot(self, rank: int, slot, value: int) -> None:
        cur = self.slot(rank, slot)
        if value < cur:
            raise SimulationError(f"slot {slot} on rank {rank} would decrease {cur}->{value}")
        self.slots[rank][slot] = value
        self.sim.notify(("slot", rank, slot))

    def add_to_slot(self, rank: int, slot, delta: int) -> None:
        self.store_slot(rank, slot, self.slot(rank, slot) + delta)

    def deliver_signal(self, rank: int, slot, value: int | None = None,
                       increment: int | None = None) -> bool:
        """Apply a signal that travelled to ``rank``; returns False if dropped."""
        if self.faults.drop(rank):
            self.sim.record(f"r{rank}", "signal_dropped", slot=_slot_str(slot))
            return False
        if increment is not None:
            self.add_to_slot(rank, slot, increment)
        else:
            self.store_slot(rank, slot, max(value, self.slot(rank, slot)))
        return True


def _slot_str(slot) -> str:
    if isinstance(slot, tuple):
        return ".".join(str(s) for s in slot)
    return str(slot)


# -- task primitives -----------------------------------------------------------

@dataclass
class Compute:
    duration: int
    effect: Callable[[], None] | None = None


@dataclass
class SignalStore:
    """Store ``value`` into each (target rank, slot); one entry per target."""

    updates: list[tuple[int, object, int]]


@dataclass
class Copy:
    src: Buf
    dst: Buf
    tag: dict = field(default_factory=dict)


@dataclass
class PayloadCopy:
    copies: list[Copy]

    def __post_init__(self):
        for c in self.copies:
            if c.src.nbytes <= 0 or c.src.nbytes != c.dst.nbytes:
                raise ValueError(f"bad copy {c.src} -> {c.dst}")

    @property
    def nbytes(self) -> int:
        return sum(c.src.nbytes for c in self.copies)


@dataclass
class WaitPoll:
    """Block until every local slot reaches its expected value."""

    preds: list[tuple[object, int]]

    def __post_init__(self):
        for _, expected in self.preds:
            if expected < 1:
                raise ValueError("WaitPoll expected value must be >= 1")


@dataclass
class MmioStore:
    registers: list[str]


_OP_ACTION = {
    Compute: "compute",
    SignalStore: "signal_store",
    PayloadCopy: "payload_copy",
    MmioStore: "mmio_store",
}


@dataclass
class GpuTask:
    ops: list
    label: str = ""
    category: str = "app"
    on_start: Callable[[], None] | None = None
    on_complete: Callable[[], None] | None = None

    @classmethod
    def single(cls, op, label: str = "", category: str = "app", **hooks) -> "GpuTask":
        return cls([op], label, category, **hooks)


class Stream:
    def __init__(self, sid: str, rank: int):
        self.id = sid
        self.rank = rank
        self.queue: deque[GpuTask] = deque()
        self.current: GpuTask | None = None
        self.blocked = False
        self.completed = 0

    @property
    def state(self) -> str:
        if self.current is None:
            return "idle"
        return "blocked" if self.blocked else "running"

    @property
    def drained(self) -> bool:
        return self.current is None and not self.queue


class Gpu:
    """All GPUs of a simulated job, one device per rank."""

    def __init__(self, sim: Simulator, mem: DeviceMemory, cost: CostModel, nic=None):
        self.sim = sim
        self.mem = mem
        self.cost = cost
        self.nic = nic
        self.streams: dict[str, Stream] = {}
        self._ids = itertools.count()
        sim.add_probe(self._stuck)

    def create_stream(self, rank: int) -> str:
        if not 0 <= rank < self.mem.nranks:
            raise ConfigError(f"unknown rank {rank}")
        sid = f"s{next(self._ids)}"
        self.streams[sid] = Stream(sid, rank)
        return sid

    # -- host-facing API --------------------------------------------------------

    def enqueue(self, sid: str, task: GpuTask) -> None:
        """Append ``task``; visible to the stream controller immediately."""
        stream = self.streams[sid]
        stream.queue.append(task)
        if stream.current is None and len(stream.queue) == 1:
            self.sim.schedule(self.sim.now(), sid, "kernel_launch", self._dispatch, stream,
                              label=task.label or "-")

    def enqueue_task(self, sid: str, task: GpuTask):
        """Host generator: enqueue and pay only the host enqueue cost."""
        self.enqueue(sid, task)
        yield Delay(self.cost.host_enqueue)

    def synchronize(self, sid: str, reason: str = "sync"):
        """Host generator: block until ``sid`` drains, then pay host_sync.

        Returns the blocked duration.
        """
        stream = self.streams[sid]
        start = self.sim.now()
        self.sim.stats["host_syncs"] += 1
        self.sim.stats[f"host_syncs.{reason}"] += 1
        self.sim.record(f"h{stream.rank}", "stream_sync", stream=sid, reason=reason)
        yield WaitUntil(lambda: stream.drained, (("stream", sid),), reason, f"drain {sid}")
        yield Delay(self.cost.host_sync, reason=reason)
        return self.sim.now() - start

    # -- stream execution controller --------------------------------------------

    def _dispatch(self, stream: Stream) -> None:
        if stream.current is not None or not stream.queue:
            return
        task = stream.queue.popleft()
        stream.current = task
        self.sim.stats["kernel_launches"] += 1
        self.sim.stats[f"kernel_launches.{task.category}"] += 1
        if task.on_start:
            task.on_start()
        self.sim.after(self.cost.kernel_launch, stream.id, "kernel_begin", self._run_op,
                       stream, task, 0, label=task.label or "-")

    def _run_op(self, stream: Stream, task: GpuTask, i: int) -> None:
        while i < len(task.ops):
            op = task.ops[i]
            if isinstance(op, WaitPoll):
                for slot, _ in op.preds:
                    self.mem.slot(stream.rank, slot)  # nonexistent slot is fatal
                if self._satisfied(stream.rank, op):
                    i += 1
                    continue
                self._block(stream, task, i, op)
                return
            self.sim.after(self._op_cost(op), stream.id, _OP_ACTION[type(op)],
                           self._finish_op, stream, task, i, label=task.label or "-")
            if isinstance(op, MmioStore):
                for reg in op.registers:
                    self.nic.mmio_store(reg)
            return
        self._complete(stream, task)

    def _op_cost(self, op) -> int:
        if isinstance(op, Compute):
            return op.duration
        if isinstance(op, SignalStore):
            return self.cost.signal
        if isinstance(op, PayloadCopy):
            return self.cost.intra_copy_ns(op.nbytes)
        if isinstance(op, MmioStore):
            return self.cost.mmio
        raise SimulationError(f"unknown op {op!r}")

    def _finish_op(self, stream: Stream, task: GpuTask, i: int) -> None:
        op = task.ops[i]
        if isinstance(op, Compute):
            if op.effect:
                op.effect()
        elif isinstance(op, SignalStore):
            for rank, slot, value in op.updates:
                self.mem.deliver_signal(rank, slot, value=value)
        elif isinstance(op, PayloadCopy):
            for c in op.copies:
                self.mem.write(c.dst, self.mem.read(c.src))
                self.sim.stats["bytes_moved"] += c.src.nbytes
                self.sim.record(stream.id, "payload_write", src=c.src.rank, dst=c.dst.rank,
                                bytes=c.src.nbytes, **c.tag)
        self._run_op(stream, task, i + 1)

    def _satisfied(self, rank: int, op: WaitPoll) -> bool:
        slots = self.mem.slots[rank]
        return all(slots[s] >= v for s, v in op.preds)

    def _block(self, stream: Stream, task: GpuTask, i: int, op: WaitPoll) -> None:
        stream.blocked = True
        self.sim.record(stream.id, "wait_block", label=task.label or "-", npreds=len(op.preds))
        keys = [("slot", stream.rank, s) for s, _ in op.preds]

        def resume():
            stream.blocked = False
            self.sim.record(stream.id, "wait_resume", label=task.label or "-")
            self._run_op(stream, task, i + 1)

        self.sim.watch(keys, lambda: self._satisfied(stream.rank, op), resume, stream.id)

    def _complete(self, stream: Stream, task: GpuTask) -> None:
        self.sim.record(stream.id, "kernel_complete", label=task.label or "-")
        stream.current = None
        stream.completed += 1
        if task.on_complete:
            task.on_complete()
        self.sim.notify(("stream", stream.id))
        if stream.queue:
            self.sim.schedule(self.sim.now(), stream.id, "kernel_launch", self._dispatch,
                              stream, label=stream.queue[0].label or "-")

    def _stuck(self) -> list[str]:
        out = []
        for s in self.streams.values():
            if s.blocked:
                out.append(f"stream {s.id} (rank {s.rank}) blocked in wait-poll "
                           f"'{s.current.label}'")
            elif not s.drained:
                out.append(f"stream {s.id} (rank {s.rank}) has {len(s.queue)} queued tasks")
        return out
