"""Compute-server index cache.

Two parts: the top two tree levels (root and its children), which are
always kept, and a capacity-bounded ordered map of level-1 node images
keyed by low fence. A hit on the map yields the leaf address directly.
When the map is full, two resident entries are sampled at random and the
less recently used one is evicted.

Cached images may go stale at any time; callers validate every node they
fetch (free bit, level, fence keys) and invalidate on mismatch.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from sortedcontainers import SortedDict

from .fabric import GlobalAddress
from .layout import InternalNode


@dataclass
class CacheEntry:
    low: int
    high: int
    addr: GlobalAddress
    image: InternalNode
    level: int
    last_access: float = 0.0


class IndexCache:
    def __init__(self, capacity_bytes: int, node_size: int = 1024, seed: int = 0):
        self.node_size = node_size
        self.capacity_bytes = capacity_bytes
        self.max_entries = max(0, capacity_bytes // node_size)
        self._map: SortedDict = SortedDict()
        self._rng = random.Random(seed)
        self.top: dict[GlobalAddress, InternalNode] = {}
        self.root_addr: Optional[GlobalAddress] = None
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._map)

    @property
    def resident_bytes(self) -> int:
        return len(self._map) * self.node_size

    def entries(self):
        return list(self._map.values())

    # -- level-1 map ------------------------------------------------------------

    def _covering(self, key: int) -> Optional[CacheEntry]:
        i = self._map.bisect_right(key)
        if i == 0:
            return None
        entry = self._map.peekitem(i - 1)[1]
        return entry if entry.low <= key < entry.high else None

    def find(self, key: int, now: float = 0.0):
        """Return (leaf address, entry) from the level-1 node covering ``key``,
        or None on a miss."""
        entry = self._covering(key)
        if entry is None:
            self.misses += 1
            return None
        self.hits += 1
        entry.last_access = now
        return entry.image.child_for(key), entry

    def insert(self, addr: GlobalAddress, image: InternalNode, now: float = 0.0) -> None:
        if image.level != 1:
            raise ValueError("only level-1 nodes go into the index cache")
        if self.max_entries == 0:
            return
        # drop whatever overlaps the new range; the fresher image wins
        m = self._map
        i = m.bisect_left(image.low)
        if i > 0 and m.peekitem(i - 1)[1].high > image.low:
            i -= 1
        doomed = []
        while i < len(m):
            low, entry = m.peekitem(i)
            if low >= image.high:
                break
            doomed.append(low)
            i += 1
        for low in doomed:
            del m[low]
        m[image.low] = CacheEntry(image.low, image.high, addr, image, 1, now)
        while len(m) > self.max_entries:
            self._evict_one()

    def _evict_one(self) -> None:
        m = self._map
        n = len(m)
        if n == 1:
            m.popitem(0)
        else:
            a, b = self._rng.sample(range(n), 2)
            ea, eb = m.peekitem(a)[1], m.peekitem(b)[1]
            victim = eb if eb.last_access < ea.last_access else ea
            del m[victim.low]
        self.evictions += 1

    def invalidate(self, key: int) -> bool:
        """Forget the level-1 image covering ``key``, in the map and, for
        trees shallow enough that level 1 is a top level, in ``top`` too."""
        for addr in [a for a, img in self.top.items()
                     if img.level == 1 and img.low <= key < img.high]:
            del self.top[addr]
        entry = self._covering(key)
        if entry is None:
            return False
        del self._map[entry.low]
        return True

    def drop(self, addr: GlobalAddress) -> None:
        for low, entry in list(self._map.items()):
            if entry.addr == addr:
                del self._map[low]

    # -- always-cached top levels ----------------------------------------------

    @property
    def root(self) -> Optional[InternalNode]:
        if self.root_addr is None:
            return None
        return self.top.get(self.root_addr)

    def set_root(self, addr: GlobalAddress, image) -> None:
        if self.root_addr != addr:
            self.top.clear()
        self.root_addr = addr
        self.top[addr] = image

    def top_get(self, addr: GlobalAddress):
        return self.top.get(addr)

    def top_put(self, addr: GlobalAddress, image) -> None:
        root = self.root
        if root is not None and image.level >= root.level - 1 and image.level > 0:
            self.top[addr] = image

    def clear_top(self) -> None:
        self.top.clear()
        self.root_addr = None

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0
