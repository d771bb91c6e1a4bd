from hypothesis import given, settings, strategies as st

from dmtree.fabric import GlobalAddress, Region
from dmtree.layout import (InternalNode, LeafEntry, LeafNode, NodeFormat, SortedLeaf, bump)

FMT = NodeFormat()
keys = st.integers(1, 2**64 - 2)
vals = st.integers(0, 2**64 - 1)
nib = st.integers(0, 15)
addrs = st.builds(GlobalAddress, st.integers(0, 2**16 - 1), st.integers(1, 2**48 - 1),
                  st.just(Region.HOST))


def test_capacities_for_1k_nodes():
    # header 8 + two 8-byte fences + 8-byte sibling, 1 trailer byte
    body = 1024 - (8 + 16 + 8) - 1
    assert FMT.entry_size == 17
    assert FMT.leaf_capacity == body // 17 == 58
    assert FMT.internal_capacity == (body - 8) // 16 == 61
    assert FMT.sorted_capacity == body // 16 == 61


def test_entry_versions_bracket_payload():
    raw = FMT.encode_entry(LeafEntry(key=0x0102030405060708, value=0x1112131415161718, fev=0xA, rev=0x5))
    assert len(raw) == 17
    assert raw[0] >> 4 == 0xA
    assert raw[-1] & 0xF == 0x5
    assert raw[0] & 0xF == 0x0 and raw[1] == 0x10  # key follows the front nibble


@given(keys, vals, nib, nib)
def test_entry_roundtrip(k, v, f, r):
    e = LeafEntry(k, v, f, r)
    assert FMT.decode_entry(FMT.encode_entry(e)) == e


def test_bump_wraps_at_16():
    assert [bump(v) for v in (0, 7, 15)] == [1, 8, 0]


@given(st.lists(st.tuples(keys, vals, nib), max_size=58, unique_by=lambda t: t[0]),
       keys, keys, st.one_of(st.none(), addrs), nib, st.booleans())
@settings(max_examples=30)
def test_leaf_roundtrip(items, low, high, sib, nv, live):
    node = FMT.empty_leaf()
    for i, (k, v, ev) in enumerate(items):
        node.entries[i] = LeafEntry(k, v, ev, ev)
    node.low, node.high, node.sibling, node.fnv, node.rnv, node.live = low, high, sib, nv, nv, live
    buf = FMT.encode_leaf(node)
    assert len(buf) == 1024
    assert FMT.decode_leaf(buf) == node
    assert FMT.header(buf) == (live, 0, 0, low, high, sib)
    assert FMT.versions(buf) == (nv, nv)
    for k, v, ev in items:
        assert FMT.leaf_find(buf, k)[1:] == (v, ev, ev)
    assert sorted(k for _, k, *_ in FMT.leaf_items(buf)) == sorted(k for k, _, _ in items)


@given(st.lists(keys, max_size=61, unique=True), st.data())
@settings(max_examples=30)
def test_internal_roundtrip(ks, data):
    ks.sort()
    children = data.draw(st.lists(addrs, min_size=len(ks) + 1, max_size=len(ks) + 1))
    node = InternalNode(level=data.draw(st.integers(1, 20)), low=0, high=2**64 - 1,
                        keys=ks, children=children, fnv=3, rnv=3)
    buf = FMT.encode_internal(node)
    assert FMT.decode_internal(buf) == node
    assert FMT.header(buf)[2] == len(ks)


@given(st.lists(st.tuples(keys, vals), max_size=61, unique_by=lambda t: t[0]))
@settings(max_examples=30)
def test_sorted_leaf_roundtrip(items):
    items.sort()
    node = SortedLeaf(low=1, high=2**64 - 1, keys=[k for k, _ in items], values=[v for _, v in items])
    buf = FMT.encode_sorted(node)
    assert FMT.decode_sorted(buf) == node
    for k, v in items:
        assert FMT.sorted_find(buf, k) == v


def test_sorted_codec_other_widths():
    fmt = NodeFormat(512, key_size=4, value_size=12)
    node = SortedLeaf(low=1, high=2**32 - 1, keys=[5, 9], values=[2**90, 7])
    assert fmt.decode_sorted(fmt.encode_sorted(node)) == node


def test_child_routing():
    a, b, c = (GlobalAddress(0, 4096 * i) for i in (1, 2, 3))
    node = InternalNode(level=1, low=10, high=100, keys=[20, 50], children=[a, b, c])
    assert [node.child_for(k) for k in (10, 19, 20, 49, 50, 99)] == [a, a, b, b, c, c]
    assert node.child_range(0) == (10, 20) and node.child_range(2) == (50, 100)


def test_free_bit_and_baseline_lock_bytes_do_not_collide():
    node = LeafNode(level=0, low=0, high=2**64 - 1, entries=FMT.empty_leaf().entries)
    buf = bytearray(FMT.encode_leaf(node))
    assert buf[1] & 1 == 1
    buf[6:8] = b"\xff\xff"
    assert FMT.header(buf)[:4] == FMT.header(FMT.encode_leaf(node))[:4]
