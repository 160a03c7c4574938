import random

import numpy as np
import pytest

from stsim.costs import CostModel
from stsim.errors import ConfigError, SimulationError
from stsim.gpu import (Buf, Compute, Copy, DeviceMemory, Gpu, GpuTask, MmioStore, PayloadCopy,
                       SignalStore, WaitPoll)
from stsim.nic import NicModel
from stsim.simcore import Delay, Simulator

COST = CostModel()


def setup(nranks=2):
    sim = Simulator()
    mem = DeviceMemory(sim, nranks)
    nic = NicModel(sim, mem, COST, [0] * nranks, tops_capacity=8)
    gpu = Gpu(sim, mem, COST, nic)
    return sim, mem, nic, gpu


def completions(rep, sid):
    return [r.time for r in rep.trace if r.entity == sid and r.action == "kernel_complete"]


def test_stream_ids_and_unknown_rank():
    _, _, _, gpu = setup()
    assert gpu.create_stream(0) == "s0"
    assert gpu.create_stream(0) == "s1"
    with pytest.raises(ConfigError):
        gpu.create_stream(5)


def test_fifo_and_compute_timing():
    sim, _, _, gpu = setup()
    s = gpu.create_stream(0)
    order = []
    gpu.enqueue(s, GpuTask.single(Compute(1000, lambda: order.append("A")), "A"))
    gpu.enqueue(s, GpuTask.single(Compute(10, lambda: order.append("B")), "B"))
    rep = sim.run()
    assert order == ["A", "B"]
    # hand sum: each task pays launch then its duration
    assert completions(rep, s) == [COST.kernel_launch + 1000, 2 * COST.kernel_launch + 1010]


def test_merged_task_pays_launch_once():
    sim, _, _, gpu = setup()
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask([Compute(100), Compute(200), Compute(300)]))
    rep = sim.run()
    assert completions(rep, s) == [COST.kernel_launch + 600]
    assert rep.kernel_launches == 1


def test_enqueue_costs_host_only_the_enqueue_cost():
    sim, _, _, gpu = setup()
    s = gpu.create_stream(0)
    seen = {}

    def prog():
        yield from gpu.enqueue_task(s, GpuTask.single(Compute(10**6)))
        seen["t"] = sim.now()

    sim.spawn("h0", 0, prog())
    sim.run()
    assert seen["t"] == COST.host_enqueue


def test_synchronize_costs():
    sim, _, _, gpu = setup()
    s = gpu.create_stream(0)
    got = {}

    def prog():
        got["empty"] = yield from gpu.synchronize(s)
        gpu.enqueue(s, GpuTask.single(Compute(700)))
        got["busy"] = yield from gpu.synchronize(s)
        got["again"] = yield from gpu.synchronize(s)

    sim.spawn("h0", 0, prog())
    rep = sim.run()
    assert got["empty"] == COST.host_sync
    assert got["busy"] == COST.kernel_launch + 700 + COST.host_sync
    assert got["again"] == COST.host_sync
    assert rep.host_blocked_ns[0] == sum(got.values())


def test_wait_poll_blocks_until_slot_reaches_expected():
    sim, mem, _, gpu = setup()
    mem.add_slot(0, "x")
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask.single(WaitPoll([("x", 2)]), "w"))
    sim.schedule(100, "t", "store1", mem.store_slot, 0, "x", 1)
    sim.schedule(9000, "t", "store2", mem.store_slot, 0, "x", 2)
    rep = sim.run()
    acts = [(r.time, r.action) for r in rep.trace if r.entity == s]
    assert (COST.kernel_launch, "wait_block") in acts
    assert (9000, "wait_resume") in acts
    assert completions(rep, s) == [9000]


def test_wait_poll_already_satisfied_completes_after_launch():
    sim, mem, _, gpu = setup()
    mem.add_slot(0, "x")
    mem.store_slot(0, "x", 3)
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask.single(WaitPoll([("x", 2)])))
    rep = sim.run()
    assert completions(rep, s) == [COST.kernel_launch]


def test_wait_poll_on_missing_slot_is_fatal():
    sim, _, _, gpu = setup()
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask.single(WaitPoll([("nope", 1)])))
    with pytest.raises(SimulationError):
        sim.run()


def test_wait_poll_rejects_zero_expected():
    with pytest.raises(ValueError):
        WaitPoll([("x", 0)])


def test_signal_store_and_slots_never_decrease():
    sim, mem, _, gpu = setup()
    mem.add_slot(1, "sig")
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask.single(SignalStore([(1, "sig", 4)])))
    rep = sim.run()
    assert mem.slot(1, "sig") == 4
    assert completions(rep, s) == [COST.kernel_launch + COST.signal]
    with pytest.raises(SimulationError):
        mem.store_slot(1, "sig", 3)


def test_mmio_store_bumps_bound_counter():
    sim, _, nic, gpu = setup()
    c = nic.alloc_counter(0)
    reg = nic.bind_mmio(c)
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask.single(MmioStore([reg])))
    rep = sim.run()
    assert nic.counter_value(c) == 1
    add = [r.time for r in rep.trace if r.entity == c and r.action == "counter_add"]
    assert add == [COST.kernel_launch + COST.mmio]


def test_payload_copy_moves_bytes():
    sim, mem, _, gpu = setup()
    src = mem.alloc(0, "a", 128)
    src[:] = np.arange(128, dtype=np.uint8)
    mem.alloc(1, "b", 128)
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask.single(PayloadCopy([Copy(Buf(0, "a", 0, 128), Buf(1, "b", 0, 128))])))
    rep = sim.run()
    assert mem.read(Buf(1, "b", 0, 128)) == bytes(range(128))
    assert completions(rep, s) == [COST.kernel_launch + COST.intra_copy_ns(128)]
    assert rep.bytes_moved == 128


def test_payload_copy_rejects_zero_bytes():
    with pytest.raises(ValueError):
        PayloadCopy([Copy(Buf(0, "a", 0, 0), Buf(1, "b", 0, 0))])


def _random_tasks(rng, n):
    return [(rng.randrange(1, 5) * 100, rng.randrange(0, 2000)) for _ in range(n)]


@pytest.mark.parametrize("seed", range(20))
def test_streams_are_independent(seed):
    """Removing stream B never changes stream A's completion times."""
    rng = random.Random(seed)
    a_tasks = _random_tasks(rng, rng.randrange(1, 6))
    b_tasks = _random_tasks(rng, rng.randrange(1, 6))

    def simulate(with_b):
        sim, _, _, gpu = setup()
        sa, sb = gpu.create_stream(0), gpu.create_stream(0)

        def prog(sid, tasks):
            for gap, dur in tasks:
                yield Delay(gap)
                yield from gpu.enqueue_task(sid, GpuTask.single(Compute(dur)))

        sim.spawn("ha", 0, prog(sa, a_tasks))
        if with_b:
            sim.spawn("hb", 0, prog(sb, b_tasks))
        return completions(sim.run(), sa)

    assert simulate(True) == simulate(False)


def test_stuck_stream_is_reported():
    from stsim.errors import Deadlock

    sim, mem, _, gpu = setup()
    mem.add_slot(0, "x")
    s = gpu.create_stream(0)
    gpu.enqueue(s, GpuTask.single(WaitPoll([("x", 1)]), "never"))
    with pytest.raises(Deadlock) as err:
        sim.run()
    assert "stream s0" in str(err.value) and "never" in str(err.value)
