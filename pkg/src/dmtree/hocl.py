"""Hierarchical on-chip lock.

Every memory server keeps a global lock table (GLT) of 131,072 16-bit
slots in its on-chip region, four slots per 64-bit word. A slot holds 0
when free and the owning compute server's 16-bit id otherwise; it is taken
with a masked CAS and released with a 2-byte write that rides in the same
combine list as the node write-back.

Each compute server shadows the GLT with a local lock table (LLT). Threads
of one compute server queue on the local lock in FIFO order, so only the
queue head ever talks to the memory server, and a releasing thread can hand
the still-held global slot straight to the next local waiter, at most
``max_depth`` times in a row.
"""
from __future__ import annotations

from collections import deque
from typing import NamedTuple, Optional

from .fabric import GlobalAddress, MaskedCas, Region, Write
from .sim import Livelock, Park, Post, Sleep, Waiter

MAX_LOCKS_PER_MS = 131072
MAX_DEPTH = 4
SLOT_BITS = 16
_M64 = (1 << 64) - 1


def mix64(x: int) -> int:
    """splitmix64 finalizer."""
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & _M64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & _M64
    return x ^ (x >> 31)


class LockCoordinate(NamedTuple):
    ms_id: int
    idx: int

    @property
    def word_addr(self) -> GlobalAddress:
        return GlobalAddress(self.ms_id, (self.idx // 4) * 8, Region.ONCHIP)

    @property
    def slot_addr(self) -> GlobalAddress:
        return GlobalAddress(self.ms_id, self.idx * 2, Region.ONCHIP)

    @property
    def shift(self) -> int:
        return (self.idx % 4) * SLOT_BITS


def lock_coordinate(addr: GlobalAddress, n_locks: int = MAX_LOCKS_PER_MS) -> LockCoordinate:
    """The lock protecting a node lives on the node's own memory server."""
    return LockCoordinate(addr.ms_id, mix64(addr.pack()) % n_locks)


class LocalLock:
    __slots__ = ("held", "queue", "depth")

    def __init__(self):
        self.held = False
        self.queue: deque[Waiter] = deque()
        self.depth = 0


class LocalLockTable:
    """Per compute server; entries are created on first use."""

    def __init__(self):
        self._entries: dict[LockCoordinate, LocalLock] = {}

    def entry(self, coord: LockCoordinate) -> LocalLock:
        l = self._entries.get(coord)
        if l is None:
            l = self._entries[coord] = LocalLock()
        return l

    def __len__(self):
        return len(self._entries)


class LockGuard:
    __slots__ = ("coord", "holder", "handed_over", "released")

    def __init__(self, coord: LockCoordinate, holder, handed_over: bool):
        self.coord = coord
        self.holder = holder
        self.handed_over = handed_over
        self.released = False

    def __repr__(self):
        return f"LockGuard({self.coord}, handed_over={self.handed_over})"


class MutualExclusionViolation(AssertionError):
    pass


class HOCL:
    """Lock manager shared by every client thread of one tree.

    ``local_table=False`` skips the LLT entirely (every thread spins on the
    GLT); ``handover=False`` keeps the LLT queue but always releases
    remotely. ``trace`` records (coordinate, client id, handed_over) per
    grant.
    """

    def __init__(self, max_depth: int = MAX_DEPTH, local_table: bool = True,
                 handover: bool = True, backoff: float = 0.0,
                 retry_budget: Optional[int] = None, check: bool = True,
                 trace: bool = False, n_locks: int = MAX_LOCKS_PER_MS):
        if n_locks > MAX_LOCKS_PER_MS:
            raise ValueError("the on-chip table holds at most 131072 slots")
        self.max_depth = max_depth
        self.local_table = local_table
        self.handover = handover
        self.backoff = backoff
        self.retry_budget = retry_budget
        self.check = check
        self.n_locks = n_locks
        self.owners: dict[LockCoordinate, int] = {}
        self.trace: Optional[list] = [] if trace else None
        self.remote_acquisitions = 0
        self.handovers = 0
        self.cas_commands = 0

    def coordinate(self, addr: GlobalAddress) -> LockCoordinate:
        return lock_coordinate(addr, self.n_locks)

    def _granted(self, ctx, coord: LockCoordinate, handed: bool) -> LockGuard:
        if self.check:
            other = self.owners.get(coord)
            if other is not None:
                raise MutualExclusionViolation(
                    f"{coord} granted to client {ctx.client_id} while held by {other}")
            self.owners[coord] = ctx.client_id
        if self.trace is not None:
            self.trace.append((coord, ctx.client_id, handed))
        ctx.stats.lock_acquisitions += 1
        ctx.held_locks += 1
        if ctx.held_locks > ctx.max_held_locks:
            ctx.max_held_locks = ctx.held_locks
        return LockGuard(coord, ctx, handed)

    def lock(self, ctx, addr: GlobalAddress):
        """Generator; returns a :class:`LockGuard` once both levels are held."""
        coord = self.coordinate(addr)
        if self.local_table:
            l = ctx.cs.llt.entry(coord)
            if l.held:
                w = Waiter(ctx)
                l.queue.append(w)
                handed = yield Park(w)
                # queue ownership passed to us; the local lock stays held
                if handed:
                    self.handovers += 1
                    ctx.stats.handovers += 1
                    return self._granted(ctx, coord, True)
            else:
                l.held = True
        yield from self._acquire_remote(ctx, coord)
        self.remote_acquisitions += 1
        ctx.stats.remote_lock_acquisitions += 1
        return self._granted(ctx, coord, False)

    def _acquire_remote(self, ctx, coord: LockCoordinate):
        shift = coord.shift
        mask = 0xFFFF << shift
        me = ctx.cs.cs_id << shift
        cmd = MaskedCas(coord.word_addr, 0, me, mask)
        qp = ctx.qp(coord.ms_id)
        attempts = 0
        while True:
            attempts += 1
            self.cas_commands += 1
            ctx.stats.lock_cas += 1
            (old,) = yield Post(qp, [cmd])
            if old & mask == 0:
                return
            if self.retry_budget is not None and attempts >= self.retry_budget:
                raise Livelock(f"lock {coord} not acquired after {attempts} CAS attempts")
            if self.backoff:
                yield Sleep(self.backoff)

    def unlock(self, ctx, guard: LockGuard, combine_list: list):
        """Generator. Appends the GLT release to ``combine_list`` unless the
        lock is handed over, posts the list, then releases the local lock."""
        assert not guard.released, "lock released twice"
        assert guard.holder is ctx, "lock released by a thread that does not hold it"
        guard.released = True
        coord = guard.coord
        if self.check:
            self.owners.pop(coord, None)
        ctx.held_locks -= 1
        l = ctx.cs.llt.entry(coord) if self.local_table else None
        hand = False
        if l is not None and l.queue and self.handover and l.depth + 1 <= self.max_depth:
            l.depth += 1
            hand = True
        else:
            if l is not None:
                l.depth = 0
            combine_list = list(combine_list)
            combine_list.append(Write(coord.slot_addr, b"\x00\x00", tag="lock"))
        if combine_list:
            # a handed-over successor must see the write-back, so wait for it
            yield Post(ctx.qp(coord.ms_id), combine_list)
        if l is not None:
            if l.queue:
                l.queue.popleft().wake(hand)
            else:
                l.held = False
