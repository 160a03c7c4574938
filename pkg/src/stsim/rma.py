"""One-sided active-target RMA: classic and stream-triggered.

Every host-facing call is a generator meant to be driven with ``yield from``
inside a rank's host program. Classic calls block the host the way
post/start/complete/wait do in MPI. The ``*_stream`` calls only enqueue GPU
tasks and NIC triggered operations and return after paying enqueue costs; the
GPU stream and the NIC then drive the protocol on their own.

Signal slots are monotone. Each rank keeps, per window, one ``post`` slot and
one ``complete`` slot for every peer. The n-th epoch between a pair of ranks
is recognised by the slot reaching n, so slots never need a reset.

Inter-node signalling under ``counter_mode="monotonic"`` reuses one counter
set per (window, rank, side) and grows thresholds: the trigger threshold of
epoch k is k, and completion signals wait for the cumulative number of
payloads issued through epoch k. Under ``counter_mode="reset"`` a small ring of
counter sets is recycled, and a set is reset only after every operation that
used it has completed.
"""

from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

from .costs import CostModel
from .errors import (ConfigError, EpochAlreadyOpen, EpochClosed, GroupMismatch,
                     InvalidArgument, ResourceExhausted, SimulationError)
from .gpu import (Buf, Copy, DeviceMemory, Gpu, GpuTask, MmioStore, PayloadCopy,
                  SignalStore, WaitPoll)
from .nic import COMPLETE, NicModel, PayloadPut, SignalPut, TriggeredOp
from .simcore import Delay, Simulator, WaitUntil

CLASSIC = "classic"
STREAM = "stream"
THROTTLES = ("app", "static", "adaptive")
MERGES = ("independent", "merged")


def post_slot(win_id: int, peer: int) -> tuple:
    return ("post", win_id, peer)


def complete_slot(win_id: int, peer: int) -> tuple:
    return ("complete", win_id, peer)


@dataclass
class _CounterSet:
    trig: str
    reg: str
    cc: str
    sig_cc: str
    stores: int = 0
    payloads: int = 0
    ops: list = field(default_factory=list)

    def counters(self):
        return (self.trig, self.cc, self.sig_cc)


@dataclass
class _RankState:
    rank: int
    exposure: frozenset | None = None
    exposure_mode: str = CLASSIC
    access: frozenset | None = None
    access_mode: str = CLASSIC
    exposure_count: Counter = field(default_factory=Counter)
    access_count: Counter = field(default_factory=Counter)
    epoch_serial: int = 0
    post_calls: int = 0
    access_calls: int = 0
    pending_puts: list = field(default_factory=list)
    inter_puts: int = 0
    outstanding: int = 0
    access_set: _CounterSet | None = None
    sets: dict = field(default_factory=lambda: {"post": [], "access": []})
    ring_pos: Counter = field(default_factory=Counter)


@dataclass
class Window:
    id: int
    ranks: tuple
    nbytes: int
    region: str
    state: dict
    freed: bool = False

    def epoch_serial(self, rank: int) -> int:
        return self.state[rank].epoch_serial


class Rma:
    def __init__(self, sim: Simulator, mem: DeviceMemory, gpu: Gpu, nic: NicModel,
                 cost: CostModel, node_of: list[int], throttle: str = "adaptive",
                 merge: str = "merged", reset_ring: int = 2):
        if throttle not in THROTTLES:
            raise ConfigError(f"unknown throttle policy {throttle!r}")
        if merge not in MERGES:
            raise ConfigError(f"unknown merge policy {merge!r}")
        self.sim = sim
        self.mem = mem
        self.gpu = gpu
        self.nic = nic
        self.cost = cost
        self.node_of = list(node_of)
        self.throttle = throttle
        self.merge = merge
        self.reset_ring = reset_ring
        self.windows: dict[int, Window] = {}
        self._ids = itertools.count()
        # per rank: (group key, ops enqueued under it)
        self._group: dict[int, tuple] = {}

    # -- helpers -------------------------------------------------------------------

    def same_node(self, a: int, b: int) -> bool:
        return self.node_of[a] == self.node_of[b]

    def _group_of(self, win: Window, group) -> frozenset:
        g = frozenset(group)
        stray = g.difference(win.ranks)
        if stray:
            raise GroupMismatch(f"ranks {sorted(stray)} are not in window {win.id}")
        return g

    def _state(self, win: Window, rank: int) -> _RankState:
        if win.freed:
            raise EpochClosed(f"window {win.id} has been freed")
        try:
            return win.state[rank]
        except KeyError:
            raise GroupMismatch(f"rank {rank} is not in window {win.id}") from None

    def _slots_reach(self, rank: int, preds) -> bool:
        slots = self.mem.slots[rank]
        return all(slots[s] >= v for s, v in preds)

    def _host_signal(self, src: int, dst: int, slot, value: int):
        if self.same_node(src, dst):
            self.sim.after(self.cost.signal, f"h{src}", "signal_arrive",
                           self.mem.deliver_signal, dst, slot, value, dst=dst)
            yield Delay(self.cost.host_enqueue)
        else:
            self.nic.direct_signal(src, dst, slot, value)
            yield Delay(self.cost.nic_enqueue)

    # -- windows -------------------------------------------------------------------

    def win_create(self, ranks, nbytes: int) -> Window:
        ranks = tuple(sorted(set(ranks)))
        if not ranks:
            raise InvalidArgument("window needs at least one rank")
        if nbytes <= 0:
            raise InvalidArgument("window size must be positive")
        wid = next(self._ids)
        region = f"win{wid}"
        for r in ranks:
            self.mem.alloc(r, region, nbytes)
            for p in ranks:
                self.mem.add_slot(r, post_slot(wid, p))
                self.mem.add_slot(r, complete_slot(wid, p))
        win = Window(wid, ranks, nbytes, region, {r: _RankState(r) for r in ranks})
        self.windows[wid] = win
        self.sim.record("rma", "win_create", win=wid, ranks=len(ranks), bytes=nbytes)
        return win

    def win_free(self, win: Window) -> None:
        for st in win.state.values():
            if st.exposure is not None or st.access is not None:
                raise EpochAlreadyOpen(f"rank {st.rank} still has an open epoch on "
                                       f"window {win.id}")
        win.freed = True
        busy = {c for op in self.nic.ops.values()
                for c in (op.trigger_counter, op.completion_counter)}
        for st in win.state.values():
            for sets in st.sets.values():
                for cs in sets:
                    for cid in cs.counters():
                        if cid not in busy and not self.nic.counters[cid].subscribers:
                            self.nic.free_counter(cid)
                sets.clear()
        self.sim.record("rma", "win_free", win=win.id)

    # -- classic active target -------------------------------------------------------

    def win_post(self, rank: int, win: Window, group):
        st = self._state(win, rank)
        if st.exposure is not None:
            raise EpochAlreadyOpen(f"rank {rank} exposure epoch already open")
        g = self._group_of(win, group)
        st.exposure, st.exposure_mode = g, CLASSIC
        st.post_calls += 1
        self.sim.record(f"h{rank}", "epoch_post", win=win.id, mode=CLASSIC,
                        serial=st.epoch_serial)
        for o in sorted(g):
            st.exposure_count[o] += 1
            k = st.exposure_count[o]
            self.sim.record(f"r{rank}", "exposure_open", win=win.id, rank=rank, origin=o,
                            serial=k)
            yield from self._host_signal(rank, o, post_slot(win.id, rank), k)

    def win_start(self, rank: int, win: Window, group, mode: str = CLASSIC):
        if mode not in (CLASSIC, STREAM):
            raise InvalidArgument(f"unknown access mode {mode!r}")
        st = self._state(win, rank)
        if st.access is not None:
            raise EpochAlreadyOpen(f"rank {rank} access epoch already open")
        g = self._group_of(win, group)
        st.access, st.access_mode = g, mode
        for t in g:
            st.access_count[t] += 1
        st.pending_puts = []
        st.inter_puts = 0
        st.access_set = None
        self.sim.record(f"h{rank}", "epoch_start", win=win.id, mode=mode)
        if mode == STREAM:
            # metadata only; the wait for exposure happens on the GPU stream
            yield Delay(self.cost.host_enqueue)
            return
        preds = [(post_slot(win.id, t), st.access_count[t]) for t in sorted(g)]
        yield WaitUntil(lambda: self._slots_reach(rank, preds),
                        tuple(("slot", rank, s) for s, _ in preds), "rma",
                        f"post signals win{win.id}")

    def put(self, rank: int, win: Window, target: int, src: Buf, target_disp: int,
            nbytes: int | None = None):
        nbytes = src.nbytes if nbytes is None else nbytes
        if nbytes <= 0:
            raise InvalidArgument("put of zero bytes")
        st = self._state(win, rank)
        if st.access is None:
            raise EpochClosed(f"rank {rank} has no open access epoch on window {win.id}")
        if target not in st.access:
            raise GroupMismatch(f"rank {target} is not in rank {rank}'s access group")
        if src.rank != rank:
            raise InvalidArgument("put source must be local")
        if target_disp < 0 or target_disp + nbytes > win.nbytes:
            raise InvalidArgument(f"target range {target_disp}+{nbytes} outside window")
        src = Buf(src.rank, src.region, src.offset, nbytes)
        dst = Buf(target, win.region, target_disp, nbytes)
        if self.mem.faults.misroute_puts_from == rank and nbytes > 1:
            src = Buf(src.rank, src.region, src.offset, nbytes - 1)
            dst = Buf(target, win.region, target_disp + 1, nbytes - 1)
        tag = {"win": win.id, "serial": st.access_count[target]}
        self.sim.record(f"h{rank}", "put_enqueue", win=win.id, target=target, bytes=nbytes,
                        mode=st.access_mode)
        inter = not self.same_node(rank, target)
        if st.access_mode == CLASSIC:
            st.outstanding += 1

            def done():
                st.outstanding -= 1
                self.sim.notify(("puts", win.id, rank))

            if inter:
                self.nic.direct_put(src, dst, done, tag)
                yield Delay(self.cost.nic_enqueue)
            else:
                data = self.mem.read(src)

                def land():
                    self.mem.write(dst, data)
                    self.sim.stats["bytes_moved"] += dst.nbytes
                    self.sim.record(f"r{target}", "payload_write", src=rank, dst=target,
                                    bytes=dst.nbytes, **tag)
                    done()

                # host-driven device copy over IPC
                self.sim.after(self.cost.kernel_launch + self.cost.intra_copy_ns(dst.nbytes),
                               f"h{rank}", "copy_land", land)
                yield Delay(self.cost.host_enqueue)
            return
        if inter:
            key = ("access", win.id, rank, st.access_calls)
            yield from self.throttle_acquire(rank, 1, key)
            cs = yield from self._access_set(rank, win)
            op = TriggeredOp(rank, PayloadPut(src, dst, tag), cs.trig, cs.stores + 1, cs.cc,
                             group=key)
            self._enqueue_op(rank, op, cs)
            cs.payloads += 1
            st.inter_puts += 1
            yield Delay(self.cost.nic_enqueue)
        else:
            st.pending_puts.append(Copy(src, dst, tag))
            yield Delay(self.cost.host_enqueue)

    def win_complete(self, rank: int, win: Window):
        st = self._state(win, rank)
        if st.access is None:
            raise EpochClosed(f"rank {rank} has no open access epoch")
        if st.access_mode != CLASSIC:
            raise EpochClosed("access epoch is in stream mode; use win_complete_stream")
        yield WaitUntil(lambda: st.outstanding == 0, (("puts", win.id, rank),), "rma",
                        f"puts win{win.id}")
        for t in sorted(st.access):
            yield from self._host_signal(rank, t, complete_slot(win.id, rank),
                                         st.access_count[t])
        st.access = None
        st.access_calls += 1
        self.sim.record(f"h{rank}", "epoch_complete", win=win.id, mode=CLASSIC)

    def win_wait(self, rank: int, win: Window):
        st = self._state(win, rank)
        if st.exposure is None:
            raise EpochClosed(f"rank {rank} has no open exposure epoch")
        if st.exposure_mode != CLASSIC:
            raise EpochClosed("exposure epoch is in stream mode; use win_wait_stream")
        origins = sorted(st.exposure)
        preds = [(complete_slot(win.id, o), st.exposure_count[o]) for o in origins]
        yield WaitUntil(lambda: self._slots_reach(rank, preds),
                        tuple(("slot", rank, s) for s, _ in preds), "rma",
                        f"completion signals win{win.id}")
        for o in origins:
            self.sim.record(f"r{rank}", "exposure_close", win=win.id, rank=rank, origin=o,
                            serial=st.exposure_count[o])
        st.exposure = None
        st.epoch_serial += 1
        self.sim.record(f"h{rank}", "epoch_wait", win=win.id, mode=CLASSIC,
                        serial=st.epoch_serial)

    # -- stream-triggered active target -------------------------------------------------

    def win_post_stream(self, rank: int, win: Window, group, stream: str):
        st = self._state(win, rank)
        if st.exposure is not None:
            raise EpochAlreadyOpen(f"rank {rank} exposure epoch already open")
        g = self._group_of(win, group)
        st.exposure, st.exposure_mode = g, STREAM
        st.post_calls += 1
        serials = {}
        for o in sorted(g):
            st.exposure_count[o] += 1
            serials[o] = st.exposure_count[o]
        self.sim.record(f"h{rank}", "epoch_post", win=win.id, mode=STREAM,
                        serial=st.epoch_serial)
        inter = [o for o in sorted(g) if not self.same_node(rank, o)]
        intra = [o for o in sorted(g) if self.same_node(rank, o)]
        slot = post_slot(win.id, rank)

        def opened():
            for o, k in serials.items():
                self.sim.record(f"r{rank}", "exposure_open", win=win.id, rank=rank, origin=o,
                                serial=k)

        mmio = None
        if inter:
            key = ("post", win.id, rank, st.post_calls)
            yield from self.throttle_acquire(rank, self._pool_cost(len(inter), True), key)
            cs = yield from self._take_set(rank, win, "post")
            cs.stores += 1
            for o in inter:
                op = TriggeredOp(rank, SignalPut(o, slot), cs.trig, cs.stores, cs.cc, group=key)
                self._enqueue_op(rank, op, cs)
                yield Delay(self.cost.nic_enqueue)
            mmio = MmioStore([cs.reg])
        updates = [(o, slot, serials[o]) for o in intra]
        if self.merge == "merged":
            ops = ([SignalStore(updates)] if updates else []) + ([mmio] if mmio else [])
            tasks = [GpuTask(ops, "post", "comm")] if ops else []
        else:
            tasks = [GpuTask.single(SignalStore([u]), "post", "comm") for u in updates]
            if mmio:
                tasks.append(GpuTask.single(mmio, "post-trigger", "comm"))
        if not tasks:
            opened()
            return
        tasks[0].on_start = opened
        for t in tasks:
            yield from self.gpu.enqueue_task(stream, t)

    def win_complete_stream(self, rank: int, win: Window, stream: str):
        st = self._state(win, rank)
        if st.access is None:
            raise EpochClosed(f"rank {rank} has no open access epoch")
        if st.access_mode != STREAM:
            raise EpochClosed("access epoch was not opened in stream mode")
        targets = sorted(st.access)
        inter = [t for t in targets if not self.same_node(rank, t)]
        intra = [t for t in targets if self.same_node(rank, t)]
        key = ("access", win.id, rank, st.access_calls)
        preds = [(post_slot(win.id, t), st.access_count[t]) for t in targets]
        cs = None
        mmio = None
        if inter:
            cs = yield from self._access_set(rank, win)
            cs.stores += 1
            mmio = MmioStore([cs.reg])
        copies = st.pending_puts
        signals = [(t, complete_slot(win.id, rank), st.access_count[t]) for t in intra]

        if self.merge == "merged":
            # one kernel: wait for exposure, trigger the NIC, copy, signal
            ops = ([WaitPoll(preds)] if preds else []) + ([mmio] if mmio else [])
            ops += ([PayloadCopy(copies)] if copies else [])
            ops += ([SignalStore(signals)] if signals else [])
            tasks = [GpuTask(ops, "complete", "comm")] if ops else []
        else:
            tasks = [GpuTask.single(WaitPoll([p]), "complete-wait", "comm") for p in preds]
            if mmio:
                tasks.append(GpuTask.single(mmio, "complete-trigger", "comm"))
            tasks += [GpuTask.single(PayloadCopy([c]), "complete-copy", "comm")
                      for c in copies]
            tasks += [GpuTask.single(SignalStore([s]), "complete-signal", "comm")
                      for s in signals]
        for t in tasks:
            yield from self.gpu.enqueue_task(stream, t)

        if inter:
            yield from self.throttle_acquire(rank, self._pool_cost(len(inter), True), key)
            if st.inter_puts:
                trig, thr = cs.cc, cs.payloads
            else:
                trig, thr = cs.trig, cs.stores
            for t in inter:
                op = TriggeredOp(rank, SignalPut(t, complete_slot(win.id, rank)), trig, thr,
                                 cs.sig_cc, group=key)
                self._enqueue_op(rank, op, cs)
                yield Delay(self.cost.nic_enqueue)

        st.access = None
        st.access_set = None
        st.pending_puts = []
        st.inter_puts = 0
        st.access_calls += 1
        self.sim.record(f"h{rank}", "epoch_complete", win=win.id, mode=STREAM)

    def win_wait_stream(self, rank: int, win: Window, stream: str):
        st = self._state(win, rank)
        if st.exposure is None:
            raise EpochClosed(f"rank {rank} has no open exposure epoch")
        if st.exposure_mode != STREAM:
            raise EpochClosed("exposure epoch was not opened in stream mode")
        origins = sorted(st.exposure)
        serials = {o: st.exposure_count[o] for o in origins}
        preds = [(complete_slot(win.id, o), serials[o]) for o in origins]
        st.exposure = None
        self.sim.record(f"h{rank}", "epoch_wait", win=win.id, mode=STREAM)

        def closed():
            for o, k in serials.items():
                self.sim.record(f"r{rank}", "exposure_close", win=win.id, rank=rank, origin=o,
                                serial=k)
            st.epoch_serial += 1

        if self.merge == "merged":
            tasks = [GpuTask([WaitPoll(preds)], "wait", "comm")] if preds else []
        else:
            tasks = [GpuTask.single(WaitPoll([p]), "wait", "comm") for p in preds]
        if not tasks:
            closed()
            return
        tasks[-1].on_complete = closed
        for t in tasks:
            yield from self.gpu.enqueue_task(stream, t)

    # -- triggered-op resources --------------------------------------------------------

    def _pool_cost(self, n: int, signal: bool) -> int:
        return n if (self.nic.signals_use_pool or not signal) else 0

    def _enqueue_op(self, rank: int, op: TriggeredOp, cs: _CounterSet) -> None:
        try:
            self.nic.enqueue_triggered(op)
        except ResourceExhausted as exc:
            if self.throttle == "app":
                raise ConfigError(f"application-level throttling oversubscribed the "
                                  f"triggered-op pool ({exc}); lower app_sync_interval "
                                  f"or raise tops_capacity") from exc
            raise SimulationError(f"throttle admitted an op without resources: {exc}") from exc
        cs.ops.append(op)
        key, ops = self._group.get(rank, (None, None))
        if key != op.group:
            ops = []
            self._group[rank] = (op.group, ops)
        ops.append(op)

    def throttle_acquire(self, rank: int, n_ops: int, key):
        """Host generator: make room for ``n_ops`` descriptors of throttle group ``key``.

        Static waits for every operation outside the current group to finish;
        adaptive waits only until enough individual descriptors are free.
        """
        if n_ops <= 0:
            return
        pool = self.nic.pool(rank)
        if n_ops > pool.capacity:
            raise ConfigError(f"{n_ops} triggered ops can never fit in a pool of "
                              f"{pool.capacity}")
        if self.throttle == "app":
            return
        cur_key, ops = self._group.get(rank, (None, []))
        held = (sum(1 for op in ops if op.state != COMPLETE and op.uses_pool)
                if cur_key == key else 0)
        if held + n_ops > pool.capacity:
            raise ConfigError(f"epoch {key} needs {held + n_ops} triggered ops but the pool "
                              f"holds {pool.capacity}")
        if pool.free >= n_ops:
            return
        if self.throttle == "static":
            def cond():
                return pool.in_flight <= held
        else:
            def cond():
                return pool.free >= n_ops
        self.sim.stats["throttle_waits"] += 1
        yield Delay(self.cost.host_poll, reason="throttle")
        yield WaitUntil(cond, (("pool", rank),), "throttle", f"{n_ops} tops free")

    def app_sync(self, rank: int, streams, reason: str = "app_sync"):
        """Application-inserted sync point: drain the streams and the rank's NIC work."""
        for s in streams:
            yield from self.gpu.synchronize(s, reason)
        yield WaitUntil(lambda: self.nic.outstanding[rank] == 0, (("pool", rank),), reason,
                        "nic drain")

    def _new_set(self, rank: int) -> _CounterSet:
        node = self.node_of[rank]
        trig = self.nic.alloc_counter(node)
        reg = self.nic.bind_mmio(trig)
        return _CounterSet(trig, reg, self.nic.alloc_counter(node),
                           self.nic.alloc_counter(node))

    def _take_set(self, rank: int, win: Window, kind: str):
        """Host generator returning the counter set for a new epoch of ``kind``."""
        st = win.state[rank]
        ring = st.sets[kind]
        if self.nic.counter_mode == "monotonic":
            if not ring:
                ring.append(self._new_set(rank))
            return ring[0]
        if len(ring) < self.reset_ring:
            cs = self._new_set(rank)
            ring.append(cs)
            return cs
        cs = ring[st.ring_pos[kind] % len(ring)]
        st.ring_pos[kind] += 1
        if any(op.state != COMPLETE for op in cs.ops):
            yield Delay(self.cost.host_poll, reason="throttle")
            yield WaitUntil(lambda: all(op.state == COMPLETE for op in cs.ops),
                            (("pool", rank),), "throttle", "counter set recycle")
        for cid in cs.counters():
            self.nic.counter_reset(cid)
        cs.stores = cs.payloads = 0
        cs.ops = []
        return cs

    def _access_set(self, rank: int, win: Window):
        st = win.state[rank]
        if st.access_set is None:
            st.access_set = yield from self._take_set(rank, win, "access")
        return st.access_set
