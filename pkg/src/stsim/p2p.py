"""Two-sided eager messaging with (source, tag) matching.

Only what the halo-exchange baseline needs. There are no wildcards and no
rendezvous, and every message is buffered eagerly at the receiver. A send
completes when its data reaches the destination. A receive completes when it
is matched against an arrived message.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass

from .costs import CostModel
from .errors import InvalidArgument, SimulationError, TruncationError
from .gpu import Buf, DeviceMemory
from .simcore import Delay, Simulator, WaitUntil


@dataclass
class Envelope:
    src: int
    dst: int
    tag: int
    nbytes: int
    data: bytes
    send_req: int


@dataclass
class Request:
    id: int
    rank: int
    kind: str  # "send" | "recv"
    peer: int
    tag: int
    buf: Buf
    done: bool = False


class P2p:
    def __init__(self, sim: Simulator, mem: DeviceMemory, cost: CostModel, node_of: list[int]):
        self.sim = sim
        self.mem = mem
        self.cost = cost
        self.node_of = list(node_of)
        self.requests: dict[int, Request] = {}
        n = len(node_of)
        self.posted: list[deque[Request]] = [deque() for _ in range(n)]
        self.unexpected: list[deque[Envelope]] = [deque() for _ in range(n)]
        self._ids = itertools.count()

    def _new(self, rank, kind, peer, tag, buf) -> Request:
        req = Request(next(self._ids), rank, kind, peer, tag, buf)
        self.requests[req.id] = req
        return req

    def _finish(self, req: Request) -> None:
        req.done = True
        self.sim.notify(("req", req.rank))

    def isend(self, src: int, dst: int, tag: int, buf: Buf):
        """Host generator; returns the request id."""
        if buf.rank != src:
            raise InvalidArgument("send buffer must be local")
        if not 0 <= dst < len(self.node_of):
            raise InvalidArgument(f"unknown destination rank {dst}")
        req = self._new(src, "send", dst, tag, buf)
        env = Envelope(src, dst, tag, buf.nbytes, self.mem.read(buf), req.id)
        self.sim.record(f"h{src}", "send_post", dst=dst, tag=tag, bytes=buf.nbytes, req=req.id)
        if self.node_of[src] == self.node_of[dst]:
            latency = self.cost.kernel_launch + self.cost.intra_copy_ns(buf.nbytes)
            enqueue = self.cost.host_enqueue
        else:
            latency = self.cost.inter_put_ns(buf.nbytes)
            enqueue = self.cost.nic_enqueue
        self.sim.after(latency, f"h{src}", "arrive", self._arrive, env, dst=dst, tag=tag)
        yield Delay(enqueue)
        return req.id

    def irecv(self, dst: int, src: int, tag: int, buf: Buf):
        """Host generator; returns the request id."""
        if buf.rank != dst:
            raise InvalidArgument("receive buffer must be local")
        req = self._new(dst, "recv", src, tag, buf)
        self.sim.record(f"h{dst}", "recv_post", src=src, tag=tag, bytes=buf.nbytes, req=req.id)
        queue = self.unexpected[dst]
        for env in queue:
            if env.src == src and env.tag == tag:
                queue.remove(env)
                self._match(req, env)
                break
        else:
            self.posted[dst].append(req)
        yield Delay(self.cost.host_enqueue)
        return req.id

    def _arrive(self, env: Envelope) -> None:
        self._finish(self.requests[env.send_req])
        posted = self.posted[env.dst]
        for req in posted:
            if req.peer == env.src and req.tag == env.tag:
                posted.remove(req)
                self._match(req, env)
                return
        self.unexpected[env.dst].append(env)

    def _match(self, req: Request, env: Envelope) -> None:
        if env.nbytes > req.buf.nbytes:
            raise TruncationError(f"message of {env.nbytes} bytes from rank {env.src} tag "
                                  f"{env.tag} exceeds receive buffer of {req.buf.nbytes}")
        self.sim.record(f"r{env.dst}", "match", src=env.src, tag=env.tag, req=req.id,
                        send=env.send_req)
        dst = Buf(req.buf.rank, req.buf.region, req.buf.offset, env.nbytes)
        self.mem.write(dst, env.data)
        self.sim.stats["bytes_moved"] += env.nbytes
        self.sim.record(f"r{env.dst}", "deliver", src=env.src, bytes=env.nbytes, req=req.id)
        self._finish(req)

    def wait_all(self, rank: int, req_ids):
        """Host generator: block until every request completes, then pay host_sync.

        Returns the blocked duration.
        """
        reqs = []
        for rid in req_ids:
            req = self.requests.get(rid)
            if req is None:
                raise InvalidArgument(f"unknown request {rid}")
            if req.rank != rank:
                raise SimulationError(f"request {rid} belongs to rank {req.rank}")
            reqs.append(req)
        if not reqs:
            return 0
        start = self.sim.now()
        yield WaitUntil(lambda: all(r.done for r in reqs), (("req", rank),), "p2p",
                        f"{len(reqs)} requests")
        yield Delay(self.cost.host_sync, reason="p2p")
        for r in reqs:
            del self.requests[r.id]
        return self.sim.now() - start
