"""Two-stage remote memory allocation.

Each memory server runs a memory thread that carves its host region into
8 MiB chunks and grants them over RPC. Client threads pick a server round
robin, take a whole chunk, and bump-allocate node-sized blocks out of it
without further network traffic. Freeing a block only clears the node's
free bit; blocks are never recycled within a run.
"""
from __future__ import annotations

from dataclasses import dataclass

from .fabric import MIB, FabricError, GlobalAddress, Region, Write
from .sim import Post, Rpc

CHUNK_SIZE = 8 * MIB
# Host bytes below this offset hold the superblock (root pointer on MS 0)
# and the baseline engine's lock table; chunks start after it.
RESERVED_BYTES = 2 * MIB
FREE_BIT_OFFSET = 1  # flags byte in every node header


class MemoryExhausted(FabricError):
    pass


@dataclass
class Chunk:
    base: GlobalAddress
    size: int = CHUNK_SIZE
    cursor: int = 0

    def room(self, n: int) -> bool:
        return self.cursor + n <= self.size

    def take(self, n: int) -> GlobalAddress:
        assert self.room(n)
        addr = self.base + self.cursor
        self.cursor += n
        return addr


class MemoryThread:
    """Server-side chunk dispenser; calls are serialized per server."""

    def __init__(self, server):
        self.server = server
        self.next_offset = RESERVED_BYTES
        self.granted = 0

    def grant_chunk(self) -> Chunk:
        ms = self.server
        if self.next_offset + CHUNK_SIZE > ms.host_capacity:
            raise MemoryExhausted(f"memory server {ms.ms_id} has no free chunk")
        base = GlobalAddress(ms.ms_id, self.next_offset, Region.HOST)
        self.next_offset += CHUNK_SIZE
        self.granted += 1
        ms.ensure_host(base.offset + CHUNK_SIZE)
        return Chunk(base)


class ChunkAllocator:
    """Client-thread allocator of fixed-size node blocks.

    ``alloc_node`` is a generator for use inside the simulator (the chunk
    RPC costs one simulated round trip); ``alloc_node_now`` serves setup
    code such as bulk loading.
    """

    def __init__(self, fabric, client_id: int, node_size: int, first_ms: int = 0):
        if node_size <= 0 or CHUNK_SIZE % node_size:
            raise ValueError("node size must divide the chunk size")
        self.fabric = fabric
        self.client_id = client_id
        self.node_size = node_size
        self._next_ms = first_ms % fabric.n_servers
        self.chunks: list[Chunk] = []
        self.rpcs = 0

    @property
    def current(self):
        return self.chunks[-1] if self.chunks else None

    def _pick_ms(self) -> int:
        ms = self._next_ms
        self._next_ms = (ms + 1) % self.fabric.n_servers
        return ms

    def _adopt(self, chunk: Chunk) -> None:
        self.chunks.append(chunk)
        self.rpcs += 1
        self.fabric.metrics(self.client_id).rpcs += 1

    def alloc_node(self):
        chunk = self.current
        if chunk is None or not chunk.room(self.node_size):
            ms_id = self._pick_ms()
            thread = self.fabric.servers[ms_id].memory_thread
            chunk = yield Rpc(ms_id, thread.grant_chunk)
            self._adopt(chunk)
        return chunk.take(self.node_size)

    def alloc_node_now(self) -> GlobalAddress:
        chunk = self.current
        if chunk is None or not chunk.room(self.node_size):
            chunk = self.fabric.request_chunk(self._pick_ms())
            self._adopt(chunk)
        return chunk.take(self.node_size)


def free_node(qp, addr: GlobalAddress):
    """Clear the free bit of the node at ``addr`` with a one-sided write.

    Generator form; the node must live on ``qp``'s server. Idempotent.
    """
    yield Post(qp, [Write(addr + FREE_BIT_OFFSET, b"\x00")])
