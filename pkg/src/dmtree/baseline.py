"""FG+ comparison engine.

Same B-link skeleton and index cache as :class:`~dmtree.tree.ShermanTree`,
but with the conventional write path: sorted leaves guarded by node-level
versions only, a spin lock word in host memory taken by CAS, and four
separate round trips per insert (lock, read, whole-node write, release).
The release is a plain 2-byte Write by default; ``fg_original`` releases
with FAA instead.
"""
from __future__ import annotations

import bisect
from typing import Optional

from .fabric import Faa, Fabric, GlobalAddress, MaskedCas, Region, Write
from .hocl import MutualExclusionViolation
from .layout import SortedLeaf, bump
from .sim import Livelock, Post, Sleep
from .tree import BLinkTree, TreeConfig, TreeError

# The lock lives in the node itself, in the two reserved header bytes 6-7,
# i.e. the top 16 bits of the node's first little-endian word. The lock
# word therefore shares the node address's low bits and, with them, its NIC
# atomic bucket.
LOCK_OFFSET = 6
LOCK_SHIFT = 48
LOCK_MASK = 0xFFFF << LOCK_SHIFT


class HostLockGuard:
    __slots__ = ("addr", "tag", "holder", "released")

    def __init__(self, addr, tag, holder):
        self.addr = addr
        self.tag = tag
        self.holder = holder
        self.released = False

    @property
    def word(self) -> GlobalAddress:
        return self.addr


class HostSpinLock:
    """Per-node spin lock in host memory: CAS spin to take, Write to free."""

    def __init__(self, fg_original: bool = False, backoff: float = 0.0,
                 retry_budget: Optional[int] = None, check: bool = True):
        self.fg_original = fg_original
        self.backoff = backoff
        self.retry_budget = retry_budget
        self.check = check
        self.owners: dict = {}
        self.cas_commands = 0
        self.acquisitions = 0

    def coordinate(self, addr: GlobalAddress) -> GlobalAddress:
        return addr

    @staticmethod
    def tag_of(ctx) -> int:
        return (ctx.client_id % 0xFFFF) + 1

    def lock(self, ctx, addr: GlobalAddress):
        word = GlobalAddress(addr.ms_id, addr.offset, Region.HOST)
        tag = self.tag_of(ctx)
        cmd = MaskedCas(word, 0, tag << LOCK_SHIFT, LOCK_MASK)
        qp = ctx.qp(addr.ms_id)
        attempts = 0
        while True:
            attempts += 1
            self.cas_commands += 1
            ctx.stats.lock_cas += 1
            (old,) = yield Post(qp, [cmd])
            if old & LOCK_MASK == 0:
                break
            if self.retry_budget is not None and attempts >= self.retry_budget:
                raise Livelock(f"node lock {addr!r} not acquired after {attempts} CAS attempts")
            if self.backoff:
                yield Sleep(self.backoff)
        if self.check:
            other = self.owners.get(word)
            if other is not None:
                raise MutualExclusionViolation(f"{word!r} granted twice ({other}, {ctx.client_id})")
            self.owners[word] = ctx.client_id
        self.acquisitions += 1
        ctx.stats.lock_acquisitions += 1
        ctx.stats.remote_lock_acquisitions += 1
        ctx.held_locks += 1
        ctx.max_held_locks = max(ctx.max_held_locks, ctx.held_locks)
        return HostLockGuard(word, tag, ctx)

    def unlock(self, ctx, guard: HostLockGuard):
        assert not guard.released, "lock released twice"
        guard.released = True
        if self.check:
            self.owners.pop(guard.addr, None)
        ctx.held_locks -= 1
        if self.fg_original:
            cmd = Faa(guard.addr, -(guard.tag << LOCK_SHIFT), tag="lock")
        else:
            cmd = Write(guard.addr + LOCK_OFFSET, b"\x00\x00", tag="lock")
        yield Post(ctx.qp(guard.addr.ms_id), [cmd])


class FGPlusTree(BLinkTree):
    name = "fgplus"

    def __init__(self, fabric: Fabric, config: Optional[TreeConfig] = None,
                 locks: Optional[HostSpinLock] = None, fg_original: bool = False):
        super().__init__(fabric, config)
        self.locks = locks or HostSpinLock(fg_original=fg_original)
        self.leaf_capacity = self.fmt.sorted_capacity

    def _lock(self, ctx, addr):
        return (yield from self.locks.lock(ctx, addr))

    def _unlock(self, ctx, guard, writes):
        # no command combination: every write is its own round trip
        for w in writes:
            if w.addr == guard.addr and len(w.payload) >= LOCK_OFFSET + 2:
                # the write-back must not drop the lock it is written under
                body = bytearray(w.payload)
                body[LOCK_OFFSET:LOCK_OFFSET + 2] = guard.tag.to_bytes(2, "little")
                w = Write(w.addr, bytes(body))
            yield Post(ctx.qp(w.addr.ms_id), [w])
        yield from self.locks.unlock(ctx, guard)

    def _leaf_get(self, ctx, buf, key):
        return True, self.fmt.sorted_find(buf, key)

    def _leaf_range(self, buf, lo, hi):
        node = self.fmt.decode_sorted(buf)
        i = bisect.bisect_left(node.keys, lo)
        j = bisect.bisect_right(node.keys, hi)
        return True, list(zip(node.keys[i:j], node.values[i:j]))

    def _leaf_pairs(self, buf):
        node = self.fmt.decode_sorted(buf)
        return list(zip(node.keys, node.values))

    def _verify_leaf(self, buf, where):
        keys = self.fmt.decode_sorted(buf).keys
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise TreeError(f"{where} sorted leaf out of order")

    def _encode_leaf_items(self, items, low, high, sibling):
        node = SortedLeaf(level=0, low=low, high=high, sibling=sibling,
                          keys=[k for k, _ in items], values=[v for _, v in items])
        return self.fmt.encode_sorted(node)

    def _leaf_upsert(self, ctx, addr, guard, buf, key, value):
        fmt = self.fmt
        node = fmt.decode_sorted(buf)
        i = bisect.bisect_left(node.keys, key)
        node.fnv = bump(node.fnv)
        node.rnv = node.fnv
        if i < len(node.keys) and node.keys[i] == key:
            node.values[i] = value
        elif len(node.keys) < self.leaf_capacity:
            node.keys.insert(i, key)
            node.values.insert(i, value)
        else:
            node.keys.insert(i, key)
            node.values.insert(i, value)
            m = len(node.keys) // 2
            sep = node.keys[m]
            sib_addr = yield from ctx.allocator.alloc_node()
            sibling = SortedLeaf(level=0, low=sep, high=node.high, sibling=node.sibling,
                                 keys=node.keys[m:], values=node.values[m:])
            old_high = node.high
            node.keys, node.values = node.keys[:m], node.values[:m]
            node.high, node.sibling = sep, sib_addr
            return (yield from self._split_writes(
                ctx, guard, addr, fmt.encode_sorted(node), sib_addr,
                fmt.encode_sorted(sibling), sep, node.low, old_high, 0))
        yield from self._unlock(ctx, guard, [Write(addr, fmt.encode_sorted(node))])
        return None

    def _leaf_delete(self, ctx, addr, guard, buf, key):
        node = self.fmt.decode_sorted(buf)
        i = bisect.bisect_left(node.keys, key)
        if i == len(node.keys) or node.keys[i] != key:
            yield from self._unlock(ctx, guard, [])
            return False
        del node.keys[i]
        del node.values[i]
        node.fnv = bump(node.fnv)
        node.rnv = node.fnv
        yield from self._unlock(ctx, guard, [Write(addr, self.fmt.encode_sorted(node))])
        return True
