"""NIC model: hardware counters, MMIO registers and triggered operations.

A triggered operation is a command descriptor enqueued ahead of time. It sits
``pending`` until its trigger counter reaches the threshold, then ``fired``,
``executing`` and finally ``complete``, at which point its completion counter
is bumped by exactly one. Chaining falls out of that rule: a signal whose
trigger counter is a payload's completion counter fires when the payload lands.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .costs import CostModel
from .errors import ConfigError, ResourceExhausted, SimulationError
from .gpu import Buf, DeviceMemory
from .simcore import Delay, Simulator, WaitUntil

PENDING, FIRED, EXECUTING, COMPLETE = "pending", "fired", "executing", "complete"


@dataclass
class PayloadPut:
    src: Buf
    dst: Buf
    tag: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.src.nbytes <= 0 or self.src.nbytes != self.dst.nbytes:
            raise ValueError(f"bad payload put {self.src} -> {self.dst}")


@dataclass
class SignalPut:
    dst_rank: int
    slot: object
    increment: int = 1


@dataclass
class AtomicIncrement:
    rank: int
    slot: object
    increment: int = 1


@dataclass
class TriggeredOp:
    owner: int
    kind: PayloadPut | SignalPut | AtomicIncrement
    trigger_counter: str
    threshold: int
    completion_counter: str | None = None
    group: object = None
    id: str = ""
    state: str = PENDING
    uses_pool: bool = True

    @property
    def is_signal(self) -> bool:
        return not isinstance(self.kind, PayloadPut)


@dataclass
class HwCounter:
    id: str
    node: int
    value: int = 0
    subscribers: list[TriggeredOp] = field(default_factory=list)


@dataclass
class TopsPool:
    capacity: int
    in_flight: int = 0
    peak: int = 0

    @property
    def free(self) -> int:
        return self.capacity - self.in_flight


class NicModel:
    """Every NIC in the job. Counters live on a node; descriptor pools are per rank.

    ``counter_mode`` is informational here (the rma layer decides whether to
    reset counters between epochs); ``signals_use_pool=False`` lets signal
    descriptors bypass the pool bound.
    """

    def __init__(self, sim: Simulator, mem: DeviceMemory, cost: CostModel,
                 node_of: list[int], tops_capacity: int, counter_budget: int = 4096,
                 counter_mode: str = "monotonic", signals_use_pool: bool = True):
        if tops_capacity < 1:
            raise ConfigError("tops_capacity must be positive")
        if counter_mode not in ("monotonic", "reset"):
            raise ConfigError(f"unknown counter_mode {counter_mode!r}")
        self.sim = sim
        self.mem = mem
        self.cost = cost
        self.node_of = list(node_of)
        self.counter_budget = counter_budget
        self.counter_mode = counter_mode
        self.signals_use_pool = signals_use_pool
        self.counters: dict[str, HwCounter] = {}
        self.registers: dict[str, str] = {}
        self.ops: dict[str, TriggeredOp] = {}
        self.pools = [TopsPool(tops_capacity) for _ in node_of]
        self.outstanding = [0] * len(node_of)  # every op, pooled or not
        self._live = [0] * (max(node_of, default=-1) + 1)
        self._cids = itertools.count()
        self._rids = itertools.count()
        self._oids = itertools.count()
        sim.add_probe(self._stuck)

    @property
    def capacity(self) -> int:
        return self.pools[0].capacity

    def pool(self, rank: int) -> TopsPool:
        return self.pools[rank]

    # -- counters and registers -------------------------------------------------

    def alloc_counter(self, node: int) -> str:
        if not 0 <= node < len(self._live):
            raise ConfigError(f"unknown node {node}")
        if self._live[node] >= self.counter_budget:
            raise ConfigError(f"node {node} exhausted its counter budget "
                              f"({self.counter_budget})")
        self._live[node] += 1
        cid = f"c{node}.{next(self._cids)}"
        self.counters[cid] = HwCounter(cid, node)
        return cid

    def free_counter(self, cid: str) -> None:
        c = self.counters.pop(cid)
        if c.subscribers:
            raise SimulationError(f"freeing counter {cid} with pending subscribers")
        self._live[c.node] -= 1

    def bind_mmio(self, cid: str) -> str:
        if cid not in self.counters:
            raise ConfigError(f"unknown counter {cid}")
        rid = f"m{self.counters[cid].node}.{next(self._rids)}"
        self.registers[rid] = cid
        return rid

    def counter_value(self, cid: str) -> int:
        return self.counters[cid].value

    def counter_add(self, cid: str, delta: int = 1) -> None:
        if delta < 1:
            raise SimulationError("counter increments must be positive")
        c = self.counters[cid]
        c.value += delta
        self.sim.record(cid, "counter_add", delta=delta, value=c.value)
        if c.subscribers:
            ready = [op for op in c.subscribers if op.threshold <= c.value]
            if ready:
                c.subscribers = [op for op in c.subscribers if op.threshold > c.value]
                for op in ready:
                    self._fire(op)
        self.sim.notify(("counter", cid))

    def counter_reset(self, cid: str) -> None:
        c = self.counters[cid]
        if c.subscribers:
            raise SimulationError(f"reset of counter {cid} with pending subscribers")
        c.value = 0
        self.sim.record(cid, "counter_reset")

    def mmio_store(self, rid: str) -> None:
        """A local store to the register; bumps its counter after the MMIO cost."""
        cid = self.registers[rid]
        self.sim.after(self.cost.mmio, rid, "mmio_store", self.counter_add, cid, 1,
                       counter=cid)

    # -- triggered operations -----------------------------------------------------

    def enqueue_triggered(self, op: TriggeredOp) -> str:
        for cid in (op.trigger_counter, op.completion_counter):
            if cid is not None:
                c = self.counters.get(cid)
                if c is None:
                    raise SimulationError(f"unknown counter {cid}")
                if c.node != self.node_of[op.owner]:
                    raise SimulationError(f"counter {cid} is not on rank {op.owner}'s node")
        op.uses_pool = self.signals_use_pool or not op.is_signal
        pool = self.pools[op.owner]
        if op.uses_pool:
            if pool.in_flight >= pool.capacity:
                raise ResourceExhausted(f"rank {op.owner}: {pool.in_flight}/{pool.capacity} "
                                        "triggered ops in flight")
            pool.in_flight += 1
            pool.peak = max(pool.peak, pool.in_flight)
            self.sim.max_tops_in_flight = max(self.sim.max_tops_in_flight, pool.in_flight)
        op.id = f"t{next(self._oids)}"
        self.outstanding[op.owner] += 1
        op.state = PENDING
        self.ops[op.id] = op
        self.sim.stats["triggered_ops_enqueued"] += 1
        self.sim.record(op.id, "tops_enqueue", owner=op.owner, kind=type(op.kind).__name__,
                        trig=op.trigger_counter, threshold=op.threshold,
                        comp=op.completion_counter or "-", inflight=pool.in_flight)
        trig = self.counters[op.trigger_counter]
        if trig.value >= op.threshold:
            self._fire(op)
        else:
            trig.subscribers.append(op)
        return op.id

    def _fire(self, op: TriggeredOp) -> None:
        if op.state != PENDING:
            raise SimulationError(f"{op.id} fired twice")
        op.state = FIRED
        self.sim.after(self.cost.trigger_fire, op.id, "tops_fire", self._execute, op,
                       trig=op.trigger_counter)

    def _execute(self, op: TriggeredOp) -> None:
        op.state = EXECUTING
        k = op.kind
        if isinstance(k, PayloadPut):
            data = self.mem.read(k.src)  # DMA reads the source at execution time
            delay = self.cost.inter_put_ns(k.src.nbytes)
        elif isinstance(k, SignalPut):
            data = None
            delay = self.cost.inter_signal_ns()
        else:
            data = None
            delay = self.cost.signal
        self.sim.after(delay, op.id, "tops_complete", self._complete, op, data)

    def _complete(self, op: TriggeredOp, data) -> None:
        k = op.kind
        if isinstance(k, PayloadPut):
            self.mem.write(k.dst, data)
            self.sim.stats["bytes_moved"] += k.src.nbytes
            self.sim.record(op.id, "payload_write", src=k.src.rank, dst=k.dst.rank,
                            bytes=k.src.nbytes, **k.tag)
        elif isinstance(k, SignalPut):
            self.mem.deliver_signal(k.dst_rank, k.slot, increment=k.increment)
        else:
            self.mem.add_to_slot(k.rank, k.slot, k.increment)
        op.state = COMPLETE
        del self.ops[op.id]
        self.outstanding[op.owner] -= 1
        if op.uses_pool:
            self.pools[op.owner].in_flight -= 1
        self.sim.notify(("pool", op.owner))
        if op.completion_counter is not None:
            self.counter_add(op.completion_counter, 1)

    # -- host-side reads ----------------------------------------------------------

    def poll_counter(self, cid: str):
        """Host generator: one counter read, charged host_poll."""
        yield Delay(self.cost.host_poll)
        return self.counters[cid].value

    def poll_until(self, cid: str, target: int, reason: str = "poll"):
        """Host generator: spin on ``cid`` until it reaches ``target``.

        The first read costs host_poll; after that the host stays blocked until
        the counter event that satisfies it.
        """
        c = self.counters[cid]
        yield Delay(self.cost.host_poll, reason=reason)
        yield WaitUntil(lambda: c.value >= target, (("counter", cid),), reason,
                        f"{cid}>={target}")
        return c.value

    # -- direct (untriggered) transfers used by the host-driven path --------------

    def direct_put(self, src: Buf, dst: Buf, on_done=None, tag: dict | None = None) -> None:
        data = self.mem.read(src)

        def land():
            self.mem.write(dst, data)
            self.sim.stats["bytes_moved"] += src.nbytes
            self.sim.record(f"r{dst.rank}", "payload_write", src=src.rank, dst=dst.rank,
                            bytes=src.nbytes, **(tag or {}))
            if on_done:
                on_done()

        self.sim.after(self.cost.inter_put_ns(src.nbytes), f"nic{self.node_of[src.rank]}",
                       "put_land", land)

    def direct_signal(self, src_rank: int, dst_rank: int, slot, value: int) -> None:
        self.sim.after(self.cost.inter_signal_ns(), f"nic{self.node_of[src_rank]}",
                       "signal_arrive", self.mem.deliver_signal, dst_rank, slot, value,
                       dst=dst_rank)

    def _stuck(self) -> list[str]:
        out = []
        for op in self.ops.values():
            c = self.counters.get(op.trigger_counter)
            val = c.value if c else "?"
            out.append(f"triggered op {op.id} (rank {op.owner}, {type(op.kind).__name__}) "
                       f"{op.state}: {op.trigger_counter}={val} < {op.threshold}")
        return out
