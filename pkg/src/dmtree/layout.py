"""Byte-exact node formats shared by both tree engines.

Every node starts with the same header and ends with one trailer byte::

    off  size  field
    0    1     front node version (low nibble)
    1    1     flags; bit 0 is the free bit: set while live, cleared on free
    2    1     level (leaves are 0)
    3    1     reserved
    4    2     entry count, little endian (internal and sorted leaves only)
    6    2     reserved; the baseline engine keeps its node lock here
    8    K     low fence key, big endian
    8+K  K     high fence key, big endian
    8+2K 8     sibling pointer, little endian (0 = none)
    N-1  1     rear node version (low nibble)

Body formats (header size H = 16 + 2K):

* two-level leaf: unsorted slots of ``K + V + 1`` bytes at ``H + i*(K+V+1)``.
  A slot is one big-endian bit string ``FEV:4 | key | value | REV:4``, so the
  entry versions bracket the payload. Key 0 marks an empty slot.
* internal: leftmost child (8 bytes) at H, then sorted ``key | child`` pairs.
* sorted leaf (baseline engine): sorted ``key | value`` pairs, no entry
  versions.

Keys and values are unsigned integers of ``K`` and ``V`` bytes. Key 0 is
reserved as null and the all-ones key as the open upper fence, so live
keys lie in ``[1, 2**(8K) - 2]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

from .fabric import GlobalAddress

FLAG_LIVE = 0x01
_U64 = struct.Struct("<Q")
_HEAD = struct.Struct("<BBBxH2x")


def bump(v: int) -> int:
    return (v + 1) & 0xF


def _ptr(addr: Optional[GlobalAddress]) -> int:
    return 0 if addr is None else addr.pack()


@dataclass
class LeafEntry:
    key: int = 0
    value: int = 0
    fev: int = 0
    rev: int = 0

    @property
    def empty(self) -> bool:
        return self.key == 0


@dataclass
class Node:
    level: int = 0
    low: int = 0
    high: int = 0
    sibling: Optional[GlobalAddress] = None
    fnv: int = 0
    rnv: int = 0
    live: bool = True


@dataclass
class LeafNode(Node):
    entries: list = field(default_factory=list)

    def live_entries(self):
        return [e for e in self.entries if e.key]

    def slot_of(self, key: int) -> Optional[int]:
        for i, e in enumerate(self.entries):
            if e.key == key:
                return i
        return None


@dataclass
class InternalNode(Node):
    keys: list = field(default_factory=list)
    children: list = field(default_factory=list)

    def child_index(self, key: int) -> int:
        # children[i] covers [keys[i-1], keys[i])
        lo, hi = 0, len(self.keys)
        keys = self.keys
        while lo < hi:
            mid = (lo + hi) // 2
            if keys[mid] <= key:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def child_for(self, key: int) -> GlobalAddress:
        return self.children[self.child_index(key)]

    def child_range(self, i: int) -> tuple[int, int]:
        lo = self.low if i == 0 else self.keys[i - 1]
        hi = self.high if i == len(self.keys) else self.keys[i]
        return lo, hi


@dataclass
class SortedLeaf(Node):
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)


class NodeFormat:
    """Offsets and codecs for one (node size, key size, value size) triple."""

    def __init__(self, node_size: int = 1024, key_size: int = 8, value_size: int = 8):
        self.node_size = node_size
        self.key_size = key_size
        self.value_size = value_size
        self.header_size = 16 + 2 * key_size
        self.entry_size = key_size + value_size + 1
        self.leaf_capacity = (node_size - self.header_size - 1) // self.entry_size
        self.internal_capacity = (node_size - self.header_size - 8 - 1) // (key_size + 8)
        self.sorted_capacity = (node_size - self.header_size - 1) // (key_size + value_size)
        if min(self.leaf_capacity, self.internal_capacity, self.sorted_capacity) < 4:
            raise ValueError("node too small for its key/value sizes")
        self.key_max = (1 << (8 * key_size)) - 1
        self.value_max = (1 << (8 * value_size)) - 1
        self._vshift = 4
        self._kshift = 4 + 8 * value_size
        self._fshift = 4 + 8 * (value_size + key_size)
        self._kmask = self.key_max
        self._vmask = self.value_max
        self._sib = 8 + 2 * key_size

    # -- header ---------------------------------------------------------------

    def versions(self, buf) -> tuple[int, int]:
        return buf[0] & 0xF, buf[self.node_size - 1] & 0xF

    def header(self, buf):
        """(live, level, count, low, high, sibling)"""
        _, flags, level, count = _HEAD.unpack_from(buf, 0)
        k = self.key_size
        low = int.from_bytes(buf[8:8 + k], "big")
        high = int.from_bytes(buf[8 + k:8 + 2 * k], "big")
        sib = GlobalAddress.unpack(_U64.unpack_from(buf, self._sib)[0])
        return bool(flags & FLAG_LIVE), level, count, low, high, sib

    def _write_header(self, out: bytearray, node: Node, count: int) -> None:
        flags = FLAG_LIVE if node.live else 0
        _HEAD.pack_into(out, 0, node.fnv & 0xF, flags, node.level, count)
        k = self.key_size
        out[8:8 + k] = node.low.to_bytes(k, "big")
        out[8 + k:8 + 2 * k] = node.high.to_bytes(k, "big")
        _U64.pack_into(out, self._sib, _ptr(node.sibling))
        out[self.node_size - 1] = node.rnv & 0xF

    def _fill_header(self, node: Node, buf) -> Node:
        live, level, _, low, high, sib = self.header(buf)
        node.live, node.level, node.low, node.high, node.sibling = live, level, low, high, sib
        node.fnv, node.rnv = self.versions(buf)
        return node

    # -- two-level leaf -------------------------------------------------------

    def entry_offset(self, slot: int) -> int:
        return self.header_size + slot * self.entry_size

    def encode_entry(self, e: LeafEntry) -> bytes:
        word = ((e.fev & 0xF) << self._fshift) | (e.key << self._kshift) \
            | (e.value << self._vshift) | (e.rev & 0xF)
        return word.to_bytes(self.entry_size, "big")

    def decode_entry(self, raw) -> LeafEntry:
        word = int.from_bytes(raw, "big")
        return LeafEntry(key=(word >> self._kshift) & self._kmask,
                         value=(word >> self._vshift) & self._vmask,
                         fev=word >> self._fshift, rev=word & 0xF)

    def leaf_find(self, buf, key: int):
        """Scan every slot for ``key``; return (slot, value, fev, rev) or None."""
        kshift, kmask, es = self._kshift, self._kmask, self.entry_size
        off = self.header_size
        frombytes = int.from_bytes
        for slot in range(self.leaf_capacity):
            word = frombytes(buf[off:off + es], "big")
            if (word >> kshift) & kmask == key:
                return slot, (word >> self._vshift) & self._vmask, word >> self._fshift, word & 0xF
            off += es
        return None

    def leaf_items(self, buf):
        """Yield (slot, key, value, fev, rev) for occupied slots."""
        kshift, kmask, es = self._kshift, self._kmask, self.entry_size
        off = self.header_size
        frombytes = int.from_bytes
        for slot in range(self.leaf_capacity):
            word = frombytes(buf[off:off + es], "big")
            key = (word >> kshift) & kmask
            if key:
                yield slot, key, (word >> self._vshift) & self._vmask, word >> self._fshift, word & 0xF
            off += es

    def decode_leaf(self, buf) -> LeafNode:
        node = self._fill_header(LeafNode(), buf)
        es = self.entry_size
        off = self.header_size
        node.entries = [self.decode_entry(buf[off + i * es:off + (i + 1) * es])
                        for i in range(self.leaf_capacity)]
        return node

    def encode_leaf(self, node: LeafNode) -> bytes:
        if len(node.entries) > self.leaf_capacity:
            raise ValueError("too many leaf entries")
        out = bytearray(self.node_size)
        self._write_header(out, node, 0)
        off = self.header_size
        for e in node.entries:
            out[off:off + self.entry_size] = self.encode_entry(e)
            off += self.entry_size
        return bytes(out)

    def empty_leaf(self) -> LeafNode:
        return LeafNode(entries=[LeafEntry() for _ in range(self.leaf_capacity)])

    # -- internal -------------------------------------------------------------

    def decode_internal(self, buf) -> InternalNode:
        node = self._fill_header(InternalNode(), buf)
        count = _HEAD.unpack_from(buf, 0)[3]
        k = self.key_size
        off = self.header_size
        children = [GlobalAddress.unpack(_U64.unpack_from(buf, off)[0])]
        keys = []
        off += 8
        for _ in range(count):
            keys.append(int.from_bytes(buf[off:off + k], "big"))
            children.append(GlobalAddress.unpack(_U64.unpack_from(buf, off + k)[0]))
            off += k + 8
        node.keys, node.children = keys, children
        return node

    def encode_internal(self, node: InternalNode) -> bytes:
        if len(node.keys) > self.internal_capacity:
            raise ValueError("too many internal keys")
        if len(node.children) != len(node.keys) + 1:
            raise ValueError("internal node needs one more child than keys")
        out = bytearray(self.node_size)
        self._write_header(out, node, len(node.keys))
        k = self.key_size
        off = self.header_size
        _U64.pack_into(out, off, _ptr(node.children[0]))
        off += 8
        for key, child in zip(node.keys, node.children[1:]):
            out[off:off + k] = key.to_bytes(k, "big")
            _U64.pack_into(out, off + k, _ptr(child))
            off += k + 8
        return bytes(out)

    # -- sorted leaf (baseline) -----------------------------------------------

    def decode_sorted(self, buf) -> SortedLeaf:
        node = self._fill_header(SortedLeaf(), buf)
        count = min(_HEAD.unpack_from(buf, 0)[3], self.sorted_capacity)
        k, v = self.key_size, self.value_size
        off = self.header_size
        if k == 8 and v == 8:
            flat = struct.unpack_from(f">{2 * count}Q", buf, off)
            node.keys, node.values = list(flat[0::2]), list(flat[1::2])
            return node
        keys, values = [], []
        for _ in range(count):
            keys.append(int.from_bytes(buf[off:off + k], "big"))
            values.append(int.from_bytes(buf[off + k:off + k + v], "big"))
            off += k + v
        node.keys, node.values = keys, values
        return node

    def encode_sorted(self, node: SortedLeaf) -> bytes:
        if len(node.keys) > self.sorted_capacity:
            raise ValueError("too many sorted-leaf entries")
        out = bytearray(self.node_size)
        self._write_header(out, node, len(node.keys))
        k, v = self.key_size, self.value_size
        off = self.header_size
        if k == 8 and v == 8:
            flat = [x for pair in zip(node.keys, node.values) for x in pair]
            struct.pack_into(f">{len(flat)}Q", out, off, *flat)
            return bytes(out)
        for key, value in zip(node.keys, node.values):
            out[off:off + k] = key.to_bytes(k, "big")
            out[off + k:off + k + v] = value.to_bytes(v, "big")
            off += k + v
        return bytes(out)

    def sorted_find(self, buf, key: int):
        """Binary search a sorted leaf image; return the value or None."""
        count = min(_HEAD.unpack_from(buf, 0)[3], self.sorted_capacity)
        k, stride = self.key_size, self.key_size + self.value_size
        base = self.header_size
        lo, hi = 0, count
        while lo < hi:
            mid = (lo + hi) // 2
            off = base + mid * stride
            mk = int.from_bytes(buf[off:off + k], "big")
            if mk == key:
                return int.from_bytes(buf[off + k:off + stride], "big")
            if mk < key:
                lo = mid + 1
            else:
                hi = mid
        return None

    def decode_any(self, buf, sorted_leaves: bool = False) -> Node:
        if buf[2]:
            return self.decode_internal(buf)
        return self.decode_sorted(buf) if sorted_leaves else self.decode_leaf(buf)
