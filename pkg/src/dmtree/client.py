"""Compute servers and the client threads they run."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

from .allocator import ChunkAllocator
from .cache import IndexCache
from .fabric import MIB, Fabric, GlobalAddress, Read
from .hocl import LocalLockTable
from .sim import Post


@dataclass
class ThreadStats:
    read_retries: int = 0
    wraparound_retries: int = 0
    sibling_hops: int = 0
    restarts: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    lock_acquisitions: int = 0
    remote_lock_acquisitions: int = 0
    handovers: int = 0
    lock_cas: int = 0
    splits: int = 0
    merges: int = 0

    def copy(self) -> "ThreadStats":
        return ThreadStats(**{f.name: getattr(self, f.name) for f in fields(self)})

    def __sub__(self, other: "ThreadStats") -> "ThreadStats":
        return ThreadStats(**{f.name: getattr(self, f.name) - getattr(other, f.name)
                              for f in fields(self)})

    def __add__(self, other: "ThreadStats") -> "ThreadStats":
        return ThreadStats(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                              for f in fields(self)})


class ComputeServer:
    def __init__(self, cs_id: int, cache: IndexCache):
        if not 1 <= cs_id < 1 << 16:
            raise ValueError("compute server ids are nonzero 16-bit values")
        self.cs_id = cs_id
        self.cache = cache
        self.llt = LocalLockTable()
        self.threads: list[ClientThread] = []


class ClientThread:
    """One simulated client thread: owns its QPs, allocator and counters."""

    def __init__(self, fabric: Fabric, cs: ComputeServer, client_id: int, node_size: int):
        self.fabric = fabric
        self.sim = fabric.sim
        self.cs = cs
        self.client_id = client_id
        self._qps = {}
        self.allocator = ChunkAllocator(fabric, client_id, node_size, first_ms=client_id)
        self.stats = ThreadStats()
        self.held_locks = 0
        self.max_held_locks = 0

    def __repr__(self):
        return f"ClientThread(cs={self.cs.cs_id}, client={self.client_id})"

    @property
    def now(self) -> float:
        return self.sim.now

    @property
    def metrics(self):
        return self.fabric.metrics(self.client_id)

    def qp(self, ms_id: int):
        qp = self._qps.get(ms_id)
        if qp is None:
            qp = self._qps[ms_id] = self.fabric.open_qp(self.client_id, ms_id)
        return qp

    def post(self, ms_id: int, commands: list) -> Post:
        return Post(self.qp(ms_id), commands)

    def read(self, addr: GlobalAddress, length: int) -> Post:
        return Post(self.qp(addr.ms_id), [Read(addr, length)])

    def run(self, gen):
        """Drive one generator operation to completion on the simulator."""
        return self.sim.run_task(gen, name=f"client{self.client_id}")


class Cluster:
    """``n_cs`` compute servers with ``threads_per_cs`` client threads each."""

    def __init__(self, fabric: Fabric, n_cs: int = 1, threads_per_cs: int = 1,
                 node_size: int = 1024, cache_bytes: int = 64 * MIB, seed: int = 0):
        self.fabric = fabric
        self.servers: list[ComputeServer] = []
        self.threads: list[ClientThread] = []
        for c in range(n_cs):
            cs = ComputeServer(c + 1, IndexCache(cache_bytes, node_size, seed=seed * 7919 + c))
            self.servers.append(cs)
            for _ in range(threads_per_cs):
                t = ClientThread(fabric, cs, len(self.threads), node_size)
                cs.threads.append(t)
                self.threads.append(t)

    def thread(self, cs: int = 0, index: int = 0) -> ClientThread:
        return self.servers[cs].threads[index]

    def stats(self) -> ThreadStats:
        total = ThreadStats()
        for t in self.threads:
            total = total + t.stats
        return total
