"""B-link tree over the simulated fabric.

:class:`BLinkTree` holds everything both engines share: root handling,
cache-assisted traversal with fence-key validation and sibling hops,
internal-node insertion, range stitching and bulk loading.
:class:`ShermanTree` adds the write-optimized leaf path: unsorted leaves
with per-entry versions, entry-grained write-back combined with the lock
release, and HOCL locking.

All operations are generators meant to run on the fabric's simulator,
either spawned as concurrent client threads or driven one at a time
through :class:`Session`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from .allocator import ChunkAllocator
from .fabric import Fabric, GlobalAddress, Read, Write
from .hocl import HOCL
from .layout import InternalNode, LeafEntry, LeafNode, NodeFormat, bump
from .sim import Livelock, Sleep

ROOT_POINTER = GlobalAddress(0, 0)


class TreeError(Exception):
    pass


@dataclass
class TreeConfig:
    node_size: int = 1024
    key_size: int = 8
    value_size: int = 8
    # None: 16 x round trip, the shortest gap between two version bumps of
    # one entry
    wraparound_window: Optional[float] = None
    merge_threshold: float = 0.25
    retry_limit: int = 10000
    # test-of-the-test switches; never disable outside tests
    check_node_versions: bool = True
    check_entry_versions: bool = True
    check_wraparound: bool = True


class BLinkTree:
    name = "blink"

    def __init__(self, fabric: Fabric, config: Optional[TreeConfig] = None):
        self.fabric = fabric
        self.config = config or TreeConfig()
        cfg = self.config
        self.fmt = NodeFormat(cfg.node_size, cfg.key_size, cfg.value_size)
        if cfg.node_size % fabric.config.atomicity_unit and \
                fabric.config.atomicity_unit % cfg.node_size:
            raise ValueError("atomicity unit and node size must divide one another")
        self.window = cfg.wraparound_window or 16 * fabric.config.round_trip_latency
        self.key_max = self.fmt.key_max
        self._limit = cfg.retry_limit
        # set to a list to log ("put"/"del", key, value) in leaf-lock grant order
        self.history: Optional[list] = None

    # -- engine hooks -----------------------------------------------------------

    leaf_capacity: int

    def _lock(self, ctx, addr):
        raise NotImplementedError

    def _unlock(self, ctx, guard, writes):
        raise NotImplementedError

    def _leaf_get(self, ctx, buf, key):
        """-> (consistent, value or None)"""
        raise NotImplementedError

    def _leaf_range(self, buf, lo, hi):
        """-> (consistent, [(key, value)])"""
        raise NotImplementedError

    def _leaf_upsert(self, ctx, addr, guard, buf, key, value):
        raise NotImplementedError

    def _leaf_delete(self, ctx, addr, guard, buf, key):
        raise NotImplementedError

    def _encode_leaf_items(self, items, low, high, sibling) -> bytes:
        raise NotImplementedError

    def _leaf_pairs(self, buf) -> list:
        raise NotImplementedError

    # -- argument checks --------------------------------------------------------

    def _check_key(self, key: int) -> None:
        if not isinstance(key, int) or not 0 < key < self.key_max:
            raise ValueError(f"key must be an integer in [1, {self.key_max - 1}]")

    def _check_value(self, value: int) -> None:
        if not isinstance(value, int) or not 0 <= value <= self.fmt.value_max:
            raise ValueError("value does not fit the configured value size")

    # -- reads --------------------------------------------------------------------

    def _read_raw(self, ctx, addr: GlobalAddress):
        t0 = ctx.sim.now
        (buf,) = yield ctx.read(addr, self.fmt.node_size)
        return buf, ctx.sim.now - t0

    def _consistent(self, ctx, buf, elapsed: float) -> bool:
        cfg = self.config
        if cfg.check_node_versions and (buf[0] ^ buf[-1]) & 0xF:
            ctx.stats.read_retries += 1
            return False
        if cfg.check_wraparound and elapsed > self.window:
            ctx.stats.read_retries += 1
            ctx.stats.wraparound_retries += 1
            return False
        return True

    def _read_stable(self, ctx, addr: GlobalAddress):
        for _ in range(self._limit):
            buf, dt = yield from self._read_raw(ctx, addr)
            if self._consistent(ctx, buf, dt):
                return buf
        raise Livelock(f"node {addr!r} never read consistently")

    def _read_locked(self, ctx, addr: GlobalAddress):
        # writers are serialized by the lock, so only an overtaken DMA can
        # tear this read
        for _ in range(self._limit):
            buf, _ = yield from self._read_raw(ctx, addr)
            if not (buf[0] ^ buf[-1]) & 0xF:
                return buf
        raise Livelock(f"node {addr!r} torn under lock")

    def _fetch_internal(self, ctx, addr: GlobalAddress) -> Optional[InternalNode]:
        buf = yield from self._read_stable(ctx, addr)
        if not buf[1] & 1 or buf[2] == 0:
            return None
        return self.fmt.decode_internal(buf)

    # -- root -------------------------------------------------------------------

    def _read_root_pointer(self, ctx) -> GlobalAddress:
        (raw,) = yield ctx.post(ROOT_POINTER.ms_id, [Read(ROOT_POINTER, 8)])
        addr = GlobalAddress.unpack(int.from_bytes(raw, "little"))
        if addr is None:
            raise TreeError("tree has no root; bulkload first")
        return addr

    def _load_root(self, ctx):
        fmt = self.fmt
        for _ in range(self._limit):
            addr = yield from self._read_root_pointer(ctx)
            buf = yield from self._read_stable(ctx, addr)
            live, level, _, low, high, _ = fmt.header(buf)
            if not live or low != 0 or high != self.key_max:
                yield Sleep(self.fabric.config.round_trip_latency)
                continue
            image = fmt.decode_internal(buf) if level else LeafNode(level=0, low=low, high=high)
            ctx.cs.cache.set_root(addr, image)
            return addr, image
        raise Livelock("root pointer never settled")

    def _is_root(self, ctx, addr: GlobalAddress):
        root = yield from self._read_root_pointer(ctx)
        return root == addr

    def _grow_root(self, ctx, left: GlobalAddress, sep: int, right: GlobalAddress, level: int):
        """Publish a new root above a splitting root; caller still holds the
        old root's lock, so no second split can race this one."""
        addr = yield from ctx.allocator.alloc_node()
        root = InternalNode(level=level + 1, low=0, high=self.key_max,
                            keys=[sep], children=[left, right])
        yield ctx.post(addr.ms_id, [Write(addr, self.fmt.encode_internal(root))])
        yield ctx.post(ROOT_POINTER.ms_id,
                       [Write(ROOT_POINTER, addr.pack().to_bytes(8, "little"))])
        ctx.cs.cache.set_root(addr, root)

    # -- traversal --------------------------------------------------------------

    def _recover(self, ctx, key: int) -> None:
        """A fetched node failed validation: forget the cached path."""
        ctx.stats.restarts += 1
        ctx.cs.cache.invalidate(key)
        ctx.cs.cache.clear_top()

    def _descend(self, ctx, key: int, level: int):
        """Address of the node at ``level`` that the current path routes
        ``key`` to. Callers validate what they read there."""
        cache = ctx.cs.cache
        rtt = self.fabric.config.round_trip_latency
        for _ in range(self._limit):
            root = cache.root
            if root is None:
                _, root = yield from self._load_root(ctx)
            addr = cache.root_addr
            if root.level < level:
                # a root split is being published
                cache.clear_top()
                yield Sleep(rtt)
                continue
            if root.level == level:
                return addr
            node = root
            cached = True
            ok = True
            while True:
                if key >= node.high:
                    ctx.stats.sibling_hops += 1
                    if cached:
                        cache.top.pop(addr, None)
                    want = node.level
                    addr = node.sibling
                    if addr is None:
                        ok = False
                        break
                    node = yield from self._fetch_internal(ctx, addr)
                    cached = False
                    if node is None or node.level != want or key < node.low:
                        ok = False
                        break
                    continue
                child = node.child_for(key)
                if node.level == level + 1:
                    if node.level == 1:
                        cache.insert(addr, node, ctx.sim.now)
                    return child
                img = cache.top_get(child)
                cached = img is not None
                if img is None:
                    img = yield from self._fetch_internal(ctx, child)
                    if img is None or img.level != node.level - 1 or key < img.low:
                        ok = False
                        break
                    cache.top_put(child, img)
                addr, node = child, img
            if not ok:
                self._recover(ctx, key)
        raise Livelock(f"no path to level {level} for key {key}")

    def _leaf_addr(self, ctx, key: int, use_cache: bool = True):
        if use_cache:
            hit = ctx.cs.cache.find(key, ctx.sim.now)
            if hit is not None:
                ctx.stats.cache_hits += 1
                return hit[0], True
            ctx.stats.cache_misses += 1
        addr = yield from self._descend(ctx, key, 0)
        return addr, False

    def traverse(self, ctx, key: int):
        """Address of the live leaf covering ``key`` (validated by a read)."""
        self._check_key(key)
        addr, _ = yield from self._leaf_addr(ctx, key)
        for _ in range(self._limit):
            buf = yield from self._read_stable(ctx, addr)
            live, level, _, low, high, sib = self.fmt.header(buf)
            if not live or level != 0 or key < low:
                self._recover(ctx, key)
                addr, _ = yield from self._leaf_addr(ctx, key, use_cache=False)
                continue
            if key >= high:
                ctx.stats.sibling_hops += 1
                # whichever image routed us here predates the split
                ctx.cs.cache.invalidate(key)
                addr = sib
                continue
            return addr
        raise Livelock(f"traverse({key}) did not settle")

    # -- lookups ----------------------------------------------------------------

    def lookup(self, ctx, key: int):
        """Lock-free point read; returns the value or None."""
        self._check_key(key)
        fmt = self.fmt
        addr, _ = yield from self._leaf_addr(ctx, key)
        for _ in range(self._limit):
            buf, dt = yield from self._read_raw(ctx, addr)
            if not self._consistent(ctx, buf, dt):
                continue
            live, level, _, low, high, sib = fmt.header(buf)
            if not live or level != 0 or key < low:
                self._recover(ctx, key)
                addr, _ = yield from self._leaf_addr(ctx, key, use_cache=False)
                continue
            if key >= high:
                ctx.stats.sibling_hops += 1
                # whichever image routed us here predates the split
                ctx.cs.cache.invalidate(key)
                addr = sib
                continue
            ok, value = self._leaf_get(ctx, buf, key)
            if not ok:
                ctx.stats.read_retries += 1
                continue
            return value
        raise Livelock(f"lookup({key}) kept retrying")

    def _range_leaves(self, ctx, low: int, high: int):
        """Candidate leaf addresses for [low, high] from level-1 images."""
        cache = ctx.cs.cache
        if cache.root is None:
            yield from self._load_root(ctx)
        if cache.root.level == 0:
            return [cache.root_addr]
        out: list = []
        key = low
        while key <= high:
            hit = cache.find(key, ctx.sim.now)
            if hit is not None:
                ctx.stats.cache_hits += 1
                img = hit[1].image
            else:
                ctx.stats.cache_misses += 1
                a1 = yield from self._descend(ctx, key, 1)
                img = cache.top_get(a1)
                if img is None or img.level != 1:
                    img = yield from self._fetch_internal(ctx, a1)
                if img is None or img.level != 1 or not img.low <= key < img.high:
                    break  # stitching follows sibling pointers from here
                cache.insert(a1, img, ctx.sim.now)
            i = img.child_index(key)
            while i < len(img.children):
                lo_i, _ = img.child_range(i)
                if lo_i > high:
                    break
                out.append(img.children[i])
                i += 1
            if img.high >= self.key_max:
                break
            key = img.high
        seen = set()
        return [a for a in out if not (a in seen or seen.add(a))]

    def range_query(self, ctx, low: int, high: int):
        """All (key, value) with low <= key <= high, sorted by key.

        Leaves are fetched in one parallel wave and then stitched together
        along their fence keys; each leaf is validated on its own, so the
        result is not a snapshot under concurrent writes.
        """
        if low > high:
            raise ValueError("low must not exceed high")
        low = max(low, 1)
        high = min(high, self.key_max - 1)
        if low > high:
            return []
        fmt = self.fmt
        addrs = yield from self._range_leaves(ctx, low, high)
        t0 = ctx.sim.now
        bufs = yield [ctx.read(a, fmt.node_size) for a in addrs]
        wave = ctx.sim.now - t0
        batch = []
        for a, (buf,) in zip(addrs, bufs):
            live, level, _, lo, hi, _ = fmt.header(buf)
            if live and level == 0:
                batch.append((lo, hi, a, buf))
        result = []
        cursor = low
        sib_hint = None
        while cursor <= high:
            addr, buf, dt = None, None, 0.0
            for lo, hi, a, b in batch:
                if lo <= cursor < hi:
                    addr, buf, dt = a, b, wave
                    break
            if addr is None:
                if sib_hint is not None:
                    addr = sib_hint
                else:
                    addr, _ = yield from self._leaf_addr(ctx, cursor)
            for _ in range(self._limit):
                if buf is None:
                    buf, dt = yield from self._read_raw(ctx, addr)
                if not self._consistent(ctx, buf, dt):
                    buf = None
                    continue
                live, level, _, lo, hi, sib = fmt.header(buf)
                if not live or level != 0 or cursor < lo:
                    self._recover(ctx, cursor)
                    addr, _ = yield from self._leaf_addr(ctx, cursor, use_cache=False)
                    buf = None
                    continue
                if cursor >= hi:
                    ctx.stats.sibling_hops += 1
                    addr, buf = sib, None
                    continue
                ok, items = self._leaf_range(buf, cursor, min(high, hi - 1))
                if not ok:
                    ctx.stats.read_retries += 1
                    buf = None
                    continue
                break
            else:
                raise Livelock(f"range leaf at {cursor} kept retrying")
            result.extend(items)
            batch = [entry for entry in batch if entry[2] != addr]
            sib_hint = sib
            if hi >= self.key_max:
                break
            cursor = hi
        result.sort()
        return result

    # -- writes -----------------------------------------------------------------

    def _lock_leaf(self, ctx, key: int):
        """Lock and read the live leaf covering ``key``."""
        fmt = self.fmt
        addr, _ = yield from self._leaf_addr(ctx, key)
        for _ in range(self._limit):
            guard = yield from self._lock(ctx, addr)
            buf = yield from self._read_locked(ctx, addr)
            live, level, _, low, high, sib = fmt.header(buf)
            if live and level == 0 and low <= key:
                if key < high:
                    return addr, guard, buf
                yield from self._unlock(ctx, guard, [])
                ctx.stats.sibling_hops += 1
                # whichever image routed us here predates the split
                ctx.cs.cache.invalidate(key)
                addr = sib
                continue
            yield from self._unlock(ctx, guard, [])
            self._recover(ctx, key)
            addr, _ = yield from self._leaf_addr(ctx, key, use_cache=False)
        raise Livelock(f"could not lock the leaf for {key}")

    def insert(self, ctx, key: int, value: int):
        """Insert or update ``key``."""
        self._check_key(key)
        self._check_value(value)
        addr, guard, buf = yield from self._lock_leaf(ctx, key)
        if self.history is not None:
            self.history.append(("put", key, value))
        split = yield from self._leaf_upsert(ctx, addr, guard, buf, key, value)
        if split is not None:
            yield from self.insert_internal(ctx, *split)

    def delete(self, ctx, key: int):
        """Remove ``key``; returns whether it was present."""
        self._check_key(key)
        addr, guard, buf = yield from self._lock_leaf(ctx, key)
        if self.history is not None:
            self.history.append(("del", key, None))
        found = yield from self._leaf_delete(ctx, addr, guard, buf, key)
        return found

    def _split_writes(self, ctx, guard, addr, node_bytes, sib_addr, sib_bytes,
                      sep, old_low, old_high, level):
        """Write back a split node pair; returns the separator to push up,
        or None when the split grew a new root."""
        ctx.stats.splits += 1
        sib_write = Write(sib_addr, sib_bytes)
        node_write = Write(addr, node_bytes)
        if old_low == 0 and old_high == self.key_max:
            is_root = yield from self._is_root(ctx, addr)
            if is_root:
                yield ctx.post(sib_addr.ms_id, [sib_write])
                yield from self._grow_root(ctx, addr, sep, sib_addr, level)
                yield from self._unlock(ctx, guard, [node_write])
                return None
        yield from self._unlock(ctx, guard, [sib_write, node_write])
        return sep, sib_addr, level + 1

    def insert_internal(self, ctx, key: int, child: GlobalAddress, level: int = 1):
        """Link ``child`` (whose low fence is ``key``) into ``level``,
        splitting upward as needed. Holds one lock at a time."""
        fmt = self.fmt
        cap = fmt.internal_capacity
        while True:
            for _ in range(self._limit):
                addr = yield from self._descend(ctx, key, level)
                done = None
                for _ in range(self._limit):
                    guard = yield from self._lock(ctx, addr)
                    buf = yield from self._read_locked(ctx, addr)
                    live, lvl, _, low, high, sib = fmt.header(buf)
                    if not live or lvl != level or key < low:
                        yield from self._unlock(ctx, guard, [])
                        self._recover(ctx, key)
                        break
                    if key >= high:
                        yield from self._unlock(ctx, guard, [])
                        ctx.stats.sibling_hops += 1
                        addr = sib
                        continue
                    node = fmt.decode_internal(buf)
                    i = node.child_index(key)
                    if i > 0 and node.keys[i - 1] == key:
                        yield from self._unlock(ctx, guard, [])
                        return
                    node.keys.insert(i, key)
                    node.children.insert(i + 1, child)
                    node.fnv = bump(node.fnv)
                    node.rnv = node.fnv
                    if len(node.keys) <= cap:
                        yield from self._unlock(ctx, guard, [Write(addr, fmt.encode_internal(node))])
                        self._refresh(ctx, addr, node)
                        return
                    m = len(node.keys) // 2
                    up = node.keys[m]
                    right = InternalNode(level=level, low=up, high=node.high,
                                         sibling=node.sibling, keys=node.keys[m + 1:],
                                         children=node.children[m + 1:])
                    r_addr = yield from ctx.allocator.alloc_node()
                    old_high = node.high
                    node.keys, node.children = node.keys[:m], node.children[:m + 1]
                    node.high, node.sibling = up, r_addr
                    done = yield from self._split_writes(
                        ctx, guard, addr, fmt.encode_internal(node), r_addr,
                        fmt.encode_internal(right), up, node.low, old_high, level)
                    self._refresh(ctx, addr, node)
                    self._refresh(ctx, r_addr, right)
                    if done is None:
                        return
                    break
                else:
                    raise Livelock("internal insert kept hopping")
                if done is not None:
                    key, child, level = done
                    break
            else:
                raise Livelock(f"could not link key {key} at level {level}")

    def _refresh(self, ctx, addr: GlobalAddress, node: InternalNode) -> None:
        cache = ctx.cs.cache
        if node.level == 1:
            cache.insert(addr, node, ctx.sim.now)
        if addr in cache.top:
            cache.top[addr] = node

    # -- bulk load and inspection ----------------------------------------------

    def bulkload(self, items: Iterable, fill_factor: float = 0.8,
                 allocator: Optional[ChunkAllocator] = None) -> GlobalAddress:
        """Build the tree bottom-up from sorted unique (key, value) pairs.

        Writes straight into fabric memory (setup path, no accounting).
        Returns the root address.
        """
        if not 0 < fill_factor <= 1:
            raise ValueError("fill factor must be within (0, 1]")
        items = list(items)
        prev = 0
        for k, v in items:
            self._check_key(k)
            self._check_value(v)
            if k == prev:
                raise ValueError(f"duplicate key {k}")
            if k < prev:
                raise ValueError("bulkload input must be sorted")
            prev = k
        fmt = self.fmt
        alloc = allocator or ChunkAllocator(self.fabric, -1, fmt.node_size)
        per = max(1, min(self.leaf_capacity, int(self.leaf_capacity * fill_factor)))
        groups = [items[i:i + per] for i in range(0, len(items), per)] or [[]]
        addrs = [alloc.alloc_node_now() for _ in groups]
        lows = [0] + [g[0][0] for g in groups[1:]]
        for i, g in enumerate(groups):
            high = lows[i + 1] if i + 1 < len(groups) else self.key_max
            sib = addrs[i + 1] if i + 1 < len(groups) else None
            self.fabric.poke(addrs[i], self._encode_leaf_items(g, lows[i], high, sib))
        level = 0
        fan = max(2, min(fmt.internal_capacity + 1, int((fmt.internal_capacity + 1) * fill_factor)))
        while len(addrs) > 1:
            level += 1
            n_groups = (len(addrs) + fan - 1) // fan
            new_addrs = [alloc.alloc_node_now() for _ in range(n_groups)]
            new_lows = []
            for j in range(n_groups):
                ch = addrs[j * fan:(j + 1) * fan]
                ls = lows[j * fan:(j + 1) * fan]
                high = lows[(j + 1) * fan] if (j + 1) * fan < len(addrs) else self.key_max
                sib = new_addrs[j + 1] if j + 1 < n_groups else None
                node = InternalNode(level=level, low=ls[0], high=high, sibling=sib,
                                    keys=ls[1:], children=ch)
                self.fabric.poke(new_addrs[j], fmt.encode_internal(node))
                new_lows.append(ls[0])
            addrs, lows = new_addrs, new_lows
        self.fabric.poke(ROOT_POINTER, addrs[0].pack().to_bytes(8, "little"))
        return addrs[0]

    def root_address(self) -> GlobalAddress:
        raw = self.fabric.peek(ROOT_POINTER, 8)
        addr = GlobalAddress.unpack(int.from_bytes(raw, "little"))
        if addr is None:
            raise TreeError("tree has no root")
        return addr

    def height(self) -> int:
        return self.fabric.peek(self.root_address(), 3)[2] + 1

    def _leftmost_per_level(self):
        """Setup-path walk: leftmost node address of each level, root first."""
        addr = self.root_address()
        out = []
        while True:
            buf = self.fabric.peek(addr, self.fmt.node_size)
            out.append(addr)
            if buf[2] == 0:
                return out
            addr = self.fmt.decode_internal(buf).children[0]

    def items(self) -> list:
        """Every (key, value) in key order, read without accounting.

        Only meaningful when no operation is in flight.
        """
        out = []
        addr = self._leftmost_per_level()[-1]
        while addr is not None:
            buf = self.fabric.peek(addr, self.fmt.node_size)
            out.extend(self._leaf_pairs(buf))
            addr = self.fmt.header(buf)[5]
        out.sort()
        return out

    def verify(self) -> None:
        """Check structural invariants of a quiescent tree; raise TreeError."""
        fmt = self.fmt
        levels = self._leftmost_per_level()
        top_level = len(levels) - 1
        for depth, first in enumerate(levels):
            level = top_level - depth
            addr, expect_low = first, 0
            while addr is not None:
                buf = self.fabric.peek(addr, fmt.node_size)
                live, lvl, _, low, high, sib = fmt.header(buf)
                fnv, rnv = fmt.versions(buf)
                where = f"node {addr!r} at level {level}"
                if not live:
                    raise TreeError(f"{where} is freed but reachable")
                if lvl != level:
                    raise TreeError(f"{where} says level {lvl}")
                if fnv != rnv:
                    raise TreeError(f"{where} has mismatched node versions")
                if low != expect_low:
                    raise TreeError(f"{where} low fence {low} != left high fence {expect_low}")
                if lvl:
                    node = fmt.decode_internal(buf)
                    if any(a >= b for a, b in zip(node.keys, node.keys[1:])):
                        raise TreeError(f"{where} keys not strictly increasing")
                    keys = node.keys
                else:
                    keys = [k for k, _ in self._leaf_pairs(buf)]
                    self._verify_leaf(buf, where)
                if any(not low <= k < high for k in keys):
                    raise TreeError(f"{where} holds a key outside its fences")
                if sib is None and high != self.key_max:
                    raise TreeError(f"{where} is rightmost but high fence is {high}")
                expect_low = high
                addr = sib

    def _verify_leaf(self, buf, where: str) -> None:
        pass


class ShermanTree(BLinkTree):
    """Two-level versions, unsorted leaves, HOCL, command combination."""

    name = "sherman"

    def __init__(self, fabric: Fabric, config: Optional[TreeConfig] = None,
                 locks: Optional[HOCL] = None):
        super().__init__(fabric, config)
        self.locks = locks or HOCL()
        self.leaf_capacity = self.fmt.leaf_capacity

    def _lock(self, ctx, addr):
        return (yield from self.locks.lock(ctx, addr))

    def _unlock(self, ctx, guard, writes):
        # writes to another server cannot ride the lock's QP: post them first
        ms = guard.coord.ms_id
        local = []
        for w in writes:
            if w.addr.ms_id == ms:
                local.append(w)
            else:
                yield ctx.post(w.addr.ms_id, [w])
        yield from self.locks.unlock(ctx, guard, local)

    def _leaf_get(self, ctx, buf, key):
        hit = self.fmt.leaf_find(buf, key)
        if hit is None:
            return True, None
        _, value, fev, rev = hit
        if self.config.check_entry_versions and fev != rev:
            return False, None
        return True, value

    def _leaf_range(self, buf, lo, hi):
        out = []
        check = self.config.check_entry_versions
        for _, key, value, fev, rev in self.fmt.leaf_items(buf):
            if lo <= key <= hi:
                if check and fev != rev:
                    return False, None
                out.append((key, value))
        return True, out

    def _leaf_pairs(self, buf):
        return [(k, v) for _, k, v, _, _ in self.fmt.leaf_items(buf)]

    def _verify_leaf(self, buf, where):
        keys = set()
        for _, k, _, fev, rev in self.fmt.leaf_items(buf):
            if fev != rev:
                raise TreeError(f"{where} entry {k} has mismatched entry versions")
            if k in keys:
                raise TreeError(f"{where} holds key {k} twice")
            keys.add(k)

    def _encode_leaf_items(self, items, low, high, sibling):
        node = self.fmt.empty_leaf()
        node.low, node.high, node.sibling = low, high, sibling
        for i, (k, v) in enumerate(items):
            node.entries[i] = LeafEntry(k, v)
        return self.fmt.encode_leaf(node)

    def _entry_write(self, addr, slot, key, value, fev):
        v = bump(fev)
        entry = self.fmt.encode_entry(LeafEntry(key, value, v, v))
        return Write(addr + self.fmt.entry_offset(slot), entry)

    def _leaf_upsert(self, ctx, addr, guard, buf, key, value):
        fmt = self.fmt
        hit = fmt.leaf_find(buf, key)
        if hit is None:
            hit = fmt.leaf_find(buf, 0)
        if hit is not None:
            slot, _, fev, _ = hit
            yield from self._unlock(ctx, guard, [self._entry_write(addr, slot, key, value, fev)])
            return None
        node = fmt.decode_leaf(buf)
        items = sorted(node.live_entries(), key=lambda e: e.key)
        m = len(items) // 2
        left, right = items[:m], items[m:]
        sep = right[0].key
        (left if key < sep else right).append(LeafEntry(key, value))
        sib_addr = yield from ctx.allocator.alloc_node()
        pad = [LeafEntry() for _ in range(self.leaf_capacity)]
        sibling = LeafNode(level=0, low=sep, high=node.high, sibling=node.sibling,
                           entries=(right + pad)[:self.leaf_capacity])
        old_high = node.high
        node.high, node.sibling = sep, sib_addr
        node.entries = (left + pad)[:self.leaf_capacity]
        node.fnv = bump(node.fnv)
        node.rnv = node.fnv
        return (yield from self._split_writes(
            ctx, guard, addr, fmt.encode_leaf(node), sib_addr, fmt.encode_leaf(sibling),
            sep, node.low, old_high, 0))

    def _leaf_delete(self, ctx, addr, guard, buf, key):
        fmt = self.fmt
        hit = fmt.leaf_find(buf, key)
        if hit is None:
            yield from self._unlock(ctx, guard, [])
            return False
        slot, _, fev, _ = hit
        yield from self._unlock(ctx, guard, [self._entry_write(addr, slot, 0, 0, fev)])
        live_after = sum(1 for _ in fmt.leaf_items(buf)) - 1
        low = fmt.header(buf)[3]
        if low != 0 and live_after < self.config.merge_threshold * self.leaf_capacity:
            yield from self._try_merge(ctx, addr, low)
        return True

    # -- merging ----------------------------------------------------------------

    def _lock_pair(self, ctx, a: GlobalAddress, b: GlobalAddress):
        """Lock two nodes in global coordinate order; the second guard is
        None when both hash to the same lock."""
        ca, cb = self.locks.coordinate(a), self.locks.coordinate(b)
        if ca == cb:
            g = yield from self._lock(ctx, a)
            return g, None
        if ca < cb:
            ga = yield from self._lock(ctx, a)
            gb = yield from self._lock(ctx, b)
        else:
            gb = yield from self._lock(ctx, b)
            ga = yield from self._lock(ctx, a)
        return ga, gb

    def _try_merge(self, ctx, victim: GlobalAddress, vlow: int):
        """Fold an underfull leaf into its left neighbour.

        Both leaves are locked (in coordinate order), the neighbour absorbs
        the entries and the victim's key range, the victim's free bit is
        cleared, and finally the parent entry is redirected.
        """
        fmt = self.fmt
        left, _ = yield from self._leaf_addr(ctx, vlow - 1)
        for _ in range(8):
            buf = yield from self._read_stable(ctx, left)
            live, level, _, low, high, sib = fmt.header(buf)
            if not live or level != 0:
                return False
            if sib == victim:
                break
            if vlow - 1 >= high and sib is not None:
                left = sib
                continue
            return False
        else:
            return False
        g_left, g_victim = yield from self._lock_pair(ctx, left, victim)
        lbuf = yield from self._read_locked(ctx, left)
        vbuf = yield from self._read_locked(ctx, victim)
        lnode, vnode = fmt.decode_leaf(lbuf), fmt.decode_leaf(vbuf)
        moving = vnode.live_entries()
        ok = (lnode.live and vnode.live and lnode.level == 0 and vnode.level == 0
              and lnode.sibling == victim and lnode.high == vlow and vnode.low == vlow
              and len(moving) < self.config.merge_threshold * self.leaf_capacity
              and len(lnode.live_entries()) + len(moving) <= self.leaf_capacity)
        if not ok:
            if g_victim is not None:
                yield from self._unlock(ctx, g_victim, [])
            yield from self._unlock(ctx, g_left, [])
            return False
        empties = [i for i, e in enumerate(lnode.entries) if e.empty]
        for i, e in zip(empties, moving):
            lnode.entries[i] = LeafEntry(e.key, e.value, e.fev, e.fev)
        lnode.high, lnode.sibling = vnode.high, vnode.sibling
        lnode.fnv = bump(lnode.fnv)
        lnode.rnv = lnode.fnv
        vnode.live = False
        vnode.fnv = bump(vnode.fnv)
        vnode.rnv = vnode.fnv
        lw = Write(left, fmt.encode_leaf(lnode))
        vw = Write(victim, fmt.encode_leaf(vnode))
        # the survivor must be visible before the victim reads as freed
        if g_victim is None:
            yield from self._unlock(ctx, g_left, [lw, vw])
        else:
            yield from self._unlock(ctx, g_left, [lw])
            yield from self._unlock(ctx, g_victim, [vw])
        ctx.stats.merges += 1
        ctx.cs.cache.invalidate(vlow)
        yield from self._unlink(ctx, vlow, victim, left)
        return True

    def _unlink(self, ctx, sep: int, victim: GlobalAddress, survivor: GlobalAddress):
        """Drop the parent's separator for a merged leaf, or point the
        parent's leftmost slot at the survivor when there is no separator."""
        fmt = self.fmt
        for _ in range(self._limit):
            addr = yield from self._descend(ctx, sep, 1)
            for _ in range(self._limit):
                guard = yield from self._lock(ctx, addr)
                buf = yield from self._read_locked(ctx, addr)
                live, lvl, _, low, high, sib = fmt.header(buf)
                if not live or lvl != 1 or sep < low:
                    yield from self._unlock(ctx, guard, [])
                    self._recover(ctx, sep)
                    break
                if sep >= high:
                    yield from self._unlock(ctx, guard, [])
                    addr = sib
                    continue
                node = fmt.decode_internal(buf)
                try:
                    i = node.children.index(victim)
                except ValueError:
                    yield from self._unlock(ctx, guard, [])
                    return
                if i > 0 and node.children[i - 1] == survivor:
                    del node.keys[i - 1]
                    del node.children[i]
                else:
                    node.children[i] = survivor
                node.fnv = bump(node.fnv)
                node.rnv = node.fnv
                yield from self._unlock(ctx, guard, [Write(addr, fmt.encode_internal(node))])
                self._refresh(ctx, addr, node)
                return
        raise Livelock("could not unlink merged leaf")


class Session:
    """Blocking facade: runs each operation to completion for one thread."""

    def __init__(self, tree: BLinkTree, ctx):
        self.tree = tree
        self.ctx = ctx

    def insert(self, key: int, value: int) -> None:
        self.ctx.run(self.tree.insert(self.ctx, key, value))

    def lookup(self, key: int):
        return self.ctx.run(self.tree.lookup(self.ctx, key))

    def delete(self, key: int) -> bool:
        return self.ctx.run(self.tree.delete(self.ctx, key))

    def range_query(self, low: int, high: int) -> list:
        return self.ctx.run(self.tree.range_query(self.ctx, low, high))

    def traverse(self, key: int) -> GlobalAddress:
        return self.ctx.run(self.tree.traverse(self.ctx, key))
