"""Faces: a 26-neighbor halo exchange on a 3D rank grid.

Each rank owns a block and exchanges its surface with every in-bounds
neighbor. Faces carry n*n points, edges n points and corners a single point,
with ``s`` bytes per point. The benchmark runs three nested loops. The outer
loop allocates the exchange buffers (RMA windows for the RMA variants). The
middle loop re-initialises element values with a kernel. The inner loop
performs the exchange and is the only part that is timed.

Send data is a pure function of (seed, rank, outer, middle, inner, direction),
so the expected receive buffers can be computed without simulating anything.
"""

from __future__ import annotations

import functools
import hashlib
import itertools
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .costs import CostModel
from .errors import ConfigError
from .gpu import Buf, Compute, DeviceMemory, FaultPlan, Gpu, GpuTask
from .nic import NicModel
from .p2p import P2p
from .rma import MERGES, STREAM, THROTTLES, Rma
from .simcore import SimReport, Simulator, WaitUntil

VARIANTS = ("p2p", "arma", "st_arma")
DIRECTIONS = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
DIR_INDEX = {d: i for i, d in enumerate(DIRECTIONS)}
KINDS = {1: "face", 2: "edge", 3: "corner"}


def kind_of(offset) -> str:
    return KINDS[sum(1 for c in offset if c)]


def opposite(offset) -> tuple:
    return tuple(-c for c in offset)


def message_size(kind: str, n: int, s: int) -> int:
    if n < 1 or s < 1:
        raise ConfigError("n and s must be at least 1")
    if kind == "face":
        return n * n * s
    if kind == "edge":
        return n * s
    if kind == "corner":
        return s
    raise ConfigError(f"unknown surface kind {kind!r}")


@dataclass(frozen=True)
class GridSpec:
    px: int
    py: int
    pz: int
    ranks_per_node: int = 1
    n: int = 4
    s: int = 8
    periodic: bool = False

    def __post_init__(self):
        for name in ("px", "py", "pz", "ranks_per_node", "n", "s"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")

    @property
    def nranks(self) -> int:
        return self.px * self.py * self.pz

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.px, self.py, self.pz)

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node

    @property
    def nnodes(self) -> int:
        return math.ceil(self.nranks / self.ranks_per_node)

    def coords(self, rank: int) -> tuple[int, int, int]:
        x = rank % self.px
        y = (rank // self.px) % self.py
        z = rank // (self.px * self.py)
        return (x, y, z)

    def rank_at(self, coords) -> int:
        x, y, z = coords
        return x + self.px * (y + self.py * z)

    def label(self) -> str:
        return f"{self.px}x{self.py}x{self.pz}"


class Neighbor(NamedTuple):
    offset: tuple
    rank: int
    kind: str


def neighbors(coords, grid: GridSpec) -> list[Neighbor]:
    """In-bounds neighbors of ``coords`` in DIRECTIONS order."""
    for c, dim in zip(coords, grid.dims):
        if not 0 <= c < dim:
            raise ConfigError(f"coordinates {coords} outside grid {grid.label()}")
    out = []
    for d in DIRECTIONS:
        nc = [c + o for c, o in zip(coords, d)]
        if grid.periodic:
            nc = [c % dim for c, dim in zip(nc, grid.dims)]
        elif any(not 0 <= c < dim for c, dim in zip(nc, grid.dims)):
            continue
        out.append(Neighbor(d, grid.rank_at(nc), kind_of(d)))
    return out


class Layout:
    """Byte offsets of the 26 direction slots; identical on every rank."""

    def __init__(self, n: int, s: int):
        self.size = {d: message_size(kind_of(d), n, s) for d in DIRECTIONS}
        self.offset = {}
        pos = 0
        for d in DIRECTIONS:
            self.offset[d] = pos
            pos += self.size[d]
        self.total = pos


@functools.lru_cache(maxsize=65536)
def values(seed: int, rank: int, outer: int, middle: int, it: int, offset, nbytes: int
           ) -> np.ndarray:
    """Bytes a rank sends towards ``offset`` in inner iteration ``it`` (it = -1: init).

    Cached; the returned array is read-only.
    """
    key = f"{seed}:{rank}:{outer}:{middle}:{it}:{DIR_INDEX[offset]}".encode()
    base = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    idx = np.arange(nbytes, dtype=np.uint64)
    with np.errstate(over="ignore"):
        mixed = idx * np.uint64(0x9E3779B97F4A7C15) + np.uint64(base)
    out = ((mixed >> np.uint64(56)) & np.uint64(0xFF)).astype(np.uint8)
    out.flags.writeable = False
    return out


@dataclass
class BenchmarkConfig:
    variant: str = "st_arma"
    grid: GridSpec = field(default_factory=lambda: GridSpec(2, 2, 2, 8))
    outer: int = 2
    middle: int = 2
    inner: int = 10
    throttle: str = "adaptive"
    app_sync_interval: int | None = None
    merge: str = "merged"
    overlap: int | None = None  # ns of independent-stream compute per inner iteration
    seed: int = 0
    tops_capacity: int = 4096
    counter_mode: str = "monotonic"
    signals_use_pool: bool = True
    kernel_ns: int = 1000
    costs: dict = field(default_factory=dict)
    faults: FaultPlan | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.throttle not in THROTTLES:
            raise ConfigError(f"unknown throttle policy {self.throttle!r}")
        if self.merge not in MERGES:
            raise ConfigError(f"unknown merge policy {self.merge!r}")
        for name in ("outer", "middle", "inner"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.app_sync_interval is not None and self.app_sync_interval < 1:
            raise ConfigError("app_sync_interval must be at least 1")
        if self.overlap is not None and self.overlap < 0:
            raise ConfigError("overlap duration must be non-negative")
        if self.tops_capacity < 1:
            raise ConfigError("tops_capacity must be positive")
        unknown = set(self.costs) - set(CostModel.field_names())
        if unknown:
            raise ConfigError(f"unknown cost keys {sorted(unknown)}")

    def cost_model(self) -> CostModel:
        try:
            return CostModel().with_overrides(**self.costs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def overlap_label(self) -> str:
        return "off" if self.overlap is None else f"on:{self.overlap}"

    def with_(self, **changes) -> "BenchmarkConfig":
        return replace(self, **changes)


CSV_COLUMNS = ("variant", "px", "py", "pz", "ranks_per_node", "n", "s", "inner", "throttle",
               "merge", "overlap", "seed", "virtual_time_ns", "host_blocked_ns",
               "kernel_launches", "triggered_ops_enqueued", "max_tops_in_flight",
               "bytes_moved", "trace_hash")


@dataclass
class ResultRow:
    variant: str
    px: int
    py: int
    pz: int
    ranks_per_node: int
    n: int
    s: int
    inner: int
    throttle: str
    merge: str
    overlap: str
    seed: int
    virtual_time_ns: int
    host_blocked_ns: int
    kernel_launches: int
    triggered_ops_enqueued: int
    max_tops_in_flight: int
    bytes_moved: int
    trace_hash: str

    def values(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class Mismatch:
    rank: int
    coords: tuple
    offset: tuple
    index: int
    expected: int
    got: int


@dataclass
class FacesRun:
    config: BenchmarkConfig
    report: SimReport
    row: ResultRow
    buffers: dict[int, bytes]
    compare_mismatches: int
    loop_times: list[int]

    @property
    def ok(self) -> bool:
        return self.compare_mismatches == 0 and not verify_exchange(self)


def per_iteration_demand(config: BenchmarkConfig, rank: int) -> int:
    """Triggered-op descriptors one st_arma inner iteration enqueues on ``rank``."""
    grid = config.grid
    nbrs = {nb.rank for nb in neighbors(grid.coords(rank), grid)}
    remote = sum(1 for p in nbrs if grid.node_of(p) != grid.node_of(rank))
    payloads = sum(1 for nb in neighbors(grid.coords(rank), grid)
                   if grid.node_of(nb.rank) != grid.node_of(rank))
    signals = 2 * remote if config.signals_use_pool else 0
    return payloads + signals


class _Barrier:
    """Harness barrier; its waits are tagged so they are not charged to the library."""

    def __init__(self, sim: Simulator, parties: int):
        self.sim = sim
        self.parties = parties
        self.arrived = 0
        self.releases: list[int] = []

    def wait(self):
        self.arrived += 1
        gen = (self.arrived - 1) // self.parties + 1
        if self.arrived == gen * self.parties:
            self.releases.append(self.sim.now())
            self.sim.notify(("barrier",))
        target = gen * self.parties
        yield WaitUntil(lambda: self.arrived >= target, (("barrier",),), "barrier",
                        f"barrier {gen}")
        return self.releases[gen - 1]


def run_variant(config: BenchmarkConfig) -> FacesRun:
    grid = config.grid
    cost = config.cost_model()
    nranks = grid.nranks
    node_of = [grid.node_of(r) for r in range(nranks)]
    sim = Simulator()
    mem = DeviceMemory(sim, nranks, replace(config.faults) if config.faults else None)
    nic = NicModel(sim, mem, cost, node_of, config.tops_capacity,
                   counter_mode=config.counter_mode,
                   signals_use_pool=config.signals_use_pool)
    gpu = Gpu(sim, mem, cost, nic)
    rma = Rma(sim, mem, gpu, nic, cost, node_of, config.throttle, config.merge)
    p2p = P2p(sim, mem, cost, node_of)
    layout = Layout(grid.n, grid.s)
    nbrs = [neighbors(grid.coords(r), grid) for r in range(nranks)]
    groups = [sorted({nb.rank for nb in nbrs[r]}) for r in range(nranks)]
    streams = [gpu.create_stream(r) for r in range(nranks)]
    side = [gpu.create_stream(r) for r in range(nranks)] if config.overlap is not None else None
    barrier = _Barrier(sim, nranks)
    mismatches = [0]
    loop_ends: dict[tuple, list[int]] = {}
    releases: dict[tuple, int] = {}

    interval = None
    if config.variant == "st_arma" and config.throttle == "app":
        demand = max(per_iteration_demand(config, r) for r in range(nranks))
        if config.app_sync_interval is not None:
            interval = config.app_sync_interval
            if demand * interval > config.tops_capacity:
                raise ConfigError(f"app_sync_interval {interval} needs {demand * interval} "
                                  f"triggered ops but the pool holds {config.tops_capacity}")
        elif demand:
            interval = config.tops_capacity // demand
            if interval < 1:
                raise ConfigError(f"one iteration needs {demand} triggered ops but the pool "
                                  f"holds {config.tops_capacity}")

    # buffers for every outer iteration are allocated up front; the outer loop
    # only switches between them
    windows, recv_regions = [], []
    for o in range(config.outer):
        for r in range(nranks):
            mem.alloc(r, f"src{o}", layout.total)
        if config.variant == "p2p":
            for r in range(nranks):
                mem.alloc(r, f"recv{o}", layout.total)
            recv_regions.append(f"recv{o}")
        else:
            win = rma.win_create(range(nranks), layout.total)
            windows.append(win)
            recv_regions.append(win.region)

    def src_buf(r, o, d):
        return Buf(r, f"src{o}", layout.offset[d], layout.size[d])

    def fill_task(r, o, m, it, label):
        def effect():
            arr = mem.region(r, f"src{o}")
            for d in DIRECTIONS:
                off = layout.offset[d]
                arr[off:off + layout.size[d]] = values(config.seed, r, o, m, it, d, layout.size[d])
        return GpuTask.single(Compute(config.kernel_ns, effect), label)

    def compare_task(r, o, m, it):
        def effect():
            arr = mem.region(r, recv_regions[o])
            for nb in nbrs[r]:
                off = layout.offset[nb.offset]
                size = layout.size[nb.offset]
                want = values(config.seed, nb.rank, o, m, it, opposite(nb.offset), size)
                mismatches[0] += int(np.count_nonzero(arr[off:off + size] != want))
        return GpuTask.single(Compute(config.kernel_ns, effect), "compare")

    def inner_arma(r, o, m, it):
        win, s = windows[o], streams[r]
        yield from rma.win_post(r, win, groups[r])
        yield from gpu.enqueue_task(s, fill_task(r, o, m, it, "increment"))
        yield from gpu.synchronize(s, "sync")
        yield from rma.win_start(r, win, groups[r])
        for nb in nbrs[r]:
            back = opposite(nb.offset)
            yield from rma.put(r, win, nb.rank, src_buf(r, o, nb.offset), layout.offset[back])
        yield from rma.win_complete(r, win)
        yield from rma.win_wait(r, win)
        yield from gpu.enqueue_task(s, compare_task(r, o, m, it))
        yield from gpu.synchronize(s, "sync")

    def inner_st(r, o, m, it):
        win, s = windows[o], streams[r]
        yield from rma.win_post_stream(r, win, groups[r], s)
        yield from gpu.enqueue_task(s, fill_task(r, o, m, it, "increment"))
        yield from rma.win_start(r, win, groups[r], STREAM)
        for nb in nbrs[r]:
            back = opposite(nb.offset)
            yield from rma.put(r, win, nb.rank, src_buf(r, o, nb.offset), layout.offset[back])
        yield from rma.win_complete_stream(r, win, s)
        yield from rma.win_wait_stream(r, win, s)
        yield from gpu.enqueue_task(s, compare_task(r, o, m, it))

    def inner_p2p(r, o, m, it):
        s = streams[r]
        yield from gpu.enqueue_task(s, fill_task(r, o, m, it, "increment"))
        yield from gpu.synchronize(s, "sync")
        reqs = []
        for nb in nbrs[r]:
            buf = Buf(r, recv_regions[o], layout.offset[nb.offset], layout.size[nb.offset])
            reqs.append((yield from p2p.irecv(r, nb.rank, DIR_INDEX[opposite(nb.offset)], buf)))
        for nb in nbrs[r]:
            reqs.append((yield from p2p.isend(r, nb.rank, DIR_INDEX[nb.offset],
                                              src_buf(r, o, nb.offset))))
        yield from p2p.wait_all(r, reqs)
        yield from gpu.enqueue_task(s, compare_task(r, o, m, it))
        yield from gpu.synchronize(s, "sync")

    body = {"arma": inner_arma, "st_arma": inner_st, "p2p": inner_p2p}[config.variant]

    def program(r):
        for o in range(config.outer):
            for m in range(config.middle):
                yield from gpu.enqueue_task(streams[r], fill_task(r, o, m, -1, "init"))
                release = yield from barrier.wait()
                releases[(o, m)] = release
                for it in range(config.inner):
                    yield from body(r, o, m, it)
                    if side is not None:
                        yield from gpu.enqueue_task(
                            side[r], GpuTask.single(Compute(config.overlap), "overlap"))
                    if interval and (it + 1) % interval == 0 and it + 1 < config.inner:
                        yield from rma.app_sync(r, [streams[r]])
                yield from _finish_inner(r)
                loop_ends.setdefault((o, m), []).append(sim.now())
            yield from barrier.wait()
            if r == 0 and windows:
                rma.win_free(windows[o])

    def _finish_inner(r):
        tail = [side[r]] if side is not None else []
        if config.variant == "st_arma":
            if interval:
                yield from rma.app_sync(r, [streams[r]] + tail, "final_sync")
            else:
                for s in [streams[r]] + tail:
                    yield from gpu.synchronize(s, "final_sync")
        else:
            for s in tail:
                yield from gpu.synchronize(s, "final_sync")

    for r in range(nranks):
        sim.spawn(f"h{r}", r, program(r))
    report = sim.run()

    loop_times = [max(loop_ends[k]) - releases[k] for k in sorted(releases)]
    last = recv_regions[-1]
    buffers = {r: mem.region(r, last).tobytes() for r in range(nranks)}
    row = ResultRow(
        variant=config.variant, px=grid.px, py=grid.py, pz=grid.pz,
        ranks_per_node=grid.ranks_per_node, n=grid.n, s=grid.s, inner=config.inner,
        throttle=config.throttle, merge=config.merge, overlap=config.overlap_label,
        seed=config.seed, virtual_time_ns=sum(loop_times),
        host_blocked_ns=report.total_host_blocked_ns,
        kernel_launches=report.kernel_launches,
        triggered_ops_enqueued=report.triggered_ops_enqueued,
        max_tops_in_flight=report.max_tops_in_flight,
        bytes_moved=report.bytes_moved, trace_hash=report.trace_hash)
    return FacesRun(config, report, row, buffers, mismatches[0], loop_times)


def expected_buffers(config: BenchmarkConfig) -> dict[int, np.ndarray]:
    """Sequential oracle: receive buffers after the last iteration of every loop."""
    grid = config.grid
    layout = Layout(grid.n, grid.s)
    o, m, it = config.outer - 1, config.middle - 1, config.inner - 1
    out = {}
    for r in range(grid.nranks):
        arr = np.zeros(layout.total, dtype=np.uint8)
        for nb in neighbors(grid.coords(r), grid):
            off, size = layout.offset[nb.offset], layout.size[nb.offset]
            arr[off:off + size] = values(config.seed, nb.rank, o, m, it, opposite(nb.offset),
                                         size)
        out[r] = arr
    return out


def verify_exchange(run: FacesRun, limit: int = 10) -> list[Mismatch]:
    """First ``limit`` byte mismatches against the oracle; empty means ok."""
    grid = run.config.grid
    layout = Layout(grid.n, grid.s)
    found: list[Mismatch] = []
    for r, want in expected_buffers(run.config).items():
        got = np.frombuffer(run.buffers[r], dtype=np.uint8)
        for i in np.flatnonzero(got != want):
            d = next(d for d in reversed(DIRECTIONS) if layout.offset[d] <= i)
            found.append(Mismatch(r, grid.coords(r), d, int(i - layout.offset[d]),
                                  int(want[i]), int(got[i])))
            if len(found) >= limit:
                return found
    return found
