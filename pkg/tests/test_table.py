import os
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewdb.cache import CacheSet
from viewdb.errors import (AddressingError, CapacityError, CorruptionError,
                           OrderingError)
from viewdb.table import (EXHAUSTED, BLOCK, CursorOffset, KVEntry, TableFile,
                          build_table, encode_entry)

from _helpers import make_table, nkey


def test_three_small_entries_fit_one_block(tmp_path):
    pairs = [(nkey(i), b"v" * 100) for i in range(3)]
    t = make_table(tmp_path, 1, pairs)
    assert bytes(t.counts) == b"\x03"
    assert t.entry_count == 3
    assert t.unit_count == 1


def test_10kb_value_occupies_three_unit_jumbo(tmp_path):
    t = make_table(tmp_path, 2, [(b"big", b"x" * (10 << 10))])
    assert t.unit_count == 3
    assert bytes(t.counts) == b"\x01\x00\x00"
    got = t.read_entry(CursorOffset(0, 0))
    assert got.value == b"x" * (10 << 10)


def test_exact_packing_and_round_trip_1000_entries(tmp_path):
    # Independent packing model for 16 B keys + 100 B values:
    # entry = 1 flags + 1 klen + 1 vlen + 16 + 100 = 119 bytes, plus a
    # 2-byte offset slot -> floor(4096 / 121) = 33 entries per block.
    pairs = [(nkey(i, 16), bytes(100)) for i in range(1000)]
    per_block = BLOCK // (len(encode_entry(*pairs[0])) + 2)
    assert per_block == 33
    expect_counts = [per_block] * (1000 // per_block) + [1000 % per_block]

    t = make_table(tmp_path, 3, pairs)
    assert list(t.counts) == expect_counts
    assert t.unit_count >= 29
    assert max(t.counts) <= 35

    off = CursorOffset(0, 0)
    got = []
    while off != EXHAUSTED:
        got.append(t.read_entry(off))
        off = t.advance_cursor(off, 1)
    assert [(e.key, e.value) for e in got] == pairs


def test_open_round_trip(tmp_path):
    t = make_table(tmp_path, 4, [(nkey(i), nkey(i)) for i in range(50)])
    reopened = TableFile(t.path)
    assert reopened.entry_count == t.entry_count
    assert reopened.smallest_key == nkey(0)
    assert reopened.largest_key == nkey(49)
    reopened.close()


def test_footer_corruption_detected(tmp_path):
    t = make_table(tmp_path, 5, [(nkey(i), b"v") for i in range(10)])
    data = bytearray(open(t.path, "rb").read())
    data[-13] ^= 0xFF  # inside the checksummed footer region
    open(t.path, "wb").write(data)
    with pytest.raises(CorruptionError):
        TableFile(t.path)


def test_truncated_file_detected(tmp_path):
    t = make_table(tmp_path, 6, [(nkey(i), b"v") for i in range(10)])
    data = open(t.path, "rb").read()
    open(t.path, "wb").write(data[: len(data) // 2])
    with pytest.raises(CorruptionError):
        TableFile(t.path)


def test_empty_table_is_valid(tmp_path):
    t = make_table(tmp_path, 7, [])
    assert t.entry_count == 0
    s = t.stats()
    assert s["entry_count"] == 0
    assert s["smallest_key"] is None and s["largest_key"] is None
    reopened = TableFile(t.path)
    assert reopened.entry_count == 0
    reopened.close()


def test_read_entry_in_block_indexing(tmp_path):
    t = make_table(tmp_path, 8, [(b"a", b"1"), (b"b", b"2"), (b"c", b"3")])
    assert t.read_entry(CursorOffset(0, 0)).key == b"a"
    assert t.read_entry(CursorOffset(0, 2)) == KVEntry(b"c", b"3")
    with pytest.raises(AddressingError):
        t.read_entry(CursorOffset(0, 3))
    with pytest.raises(AddressingError):
        t.read_entry(CursorOffset(9, 0))


def _two_block_table(tmp_path, table_id=9):
    # entry ~1208 B: exactly 3 per block -> counts [3, 2]
    pairs = [(nkey(i, 4), b"v" * 1200) for i in range(5)]
    t = make_table(tmp_path, table_id, pairs)
    assert list(t.counts) == [3, 2]
    return t


def test_advance_cursor_walks_counts_only(tmp_path):
    t = _two_block_table(tmp_path)
    assert t.advance_cursor(CursorOffset(0, 1), 3) == CursorOffset(1, 1)
    assert t.advance_cursor(CursorOffset(0, 1), 0) == CursorOffset(0, 1)
    assert t.advance_cursor(CursorOffset(1, 1), 1) == EXHAUSTED
    assert t.advance_cursor(EXHAUSTED, 5) == EXHAUSTED
    assert t.touches == 0, "cursor arithmetic must not touch data blocks"


def test_stats_do_no_data_io(tmp_path):
    t = _two_block_table(tmp_path, 10)
    t.stats()
    assert t.touches == 0
    assert t.disk_reads == 0


@pytest.fixture(scope="module")
def skip_table(tmp_path_factory):
    d = tmp_path_factory.mktemp("skiptbl")
    t = make_table(d, 11, [(nkey(i, 4), b"v" * 1200) for i in range(7)])
    yield t
    t.close()


@settings(max_examples=50, deadline=None)
@given(start=st.integers(0, 7), a=st.integers(0, 9), b=st.integers(0, 9))
def test_advance_cursor_skip_equivalence(skip_table, start, a, b):
    off = skip_table.offset_of_ordinal(start)
    assert (skip_table.advance_cursor(off, a + b)
            == skip_table.advance_cursor(skip_table.advance_cursor(off, a), b))


def test_block_cache_changes_io_not_results(tmp_path):
    pairs = [(nkey(i), b"w" * 64) for i in range(500)]
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    small = make_table(tmp_path / "a", 12, pairs,
                       caches=CacheSet(block_cache_bytes=4096,
                                       decoded_cache_blocks=1))
    big = make_table(tmp_path / "b", 13, pairs, caches=CacheSet())
    seq_small = [(e.key, e.value) for e in small.entries()]
    # touch twice to exercise eviction on the small cache
    seq_small2 = [(e.key, e.value) for e in small.entries()]
    seq_big = [(e.key, e.value) for e in big.entries()]
    _ = [(e.key, e.value) for e in big.entries()]
    assert seq_small == seq_big == seq_small2 == pairs
    assert small.disk_reads > big.disk_reads


def test_unsorted_input_rejected_naming_pair(tmp_path):
    with pytest.raises(OrderingError) as exc:
        make_table(tmp_path, 14, [(b"b", b"1"), (b"a", b"2")])
    assert "b" in str(exc.value) and "a" in str(exc.value)
    with pytest.raises(OrderingError):
        make_table(tmp_path, 15, [(b"a", b"1"), (b"a", b"2")])


def test_oversized_entry_rejected(tmp_path):
    with pytest.raises(CapacityError):
        build_table([(b"k", b"x" * 20000)], str(tmp_path / "t.tbl"),
                    max_file_size=8192)


def test_build_stops_at_file_budget_with_remainder(tmp_path):
    pairs = [(nkey(i), b"v" * 1000) for i in range(100)]
    t1, rest = build_table(iter(pairs), str(tmp_path / "p1.tbl"),
                           max_file_size=16384)
    assert rest is not None
    assert 0 < t1.entry_count < 100
    t2, rest2 = build_table(rest, str(tmp_path / "p2.tbl"),
                            max_file_size=1 << 20)
    assert rest2 is None
    combined = ([(e.key, e.value) for e in t1.entries()]
                + [(e.key, e.value) for e in t2.entries()])
    assert combined == pairs


def test_unit_count_matches_file_geometry(tmp_path):
    t = make_table(tmp_path, 16, [(nkey(i, 16), bytes(100)) for i in range(1000)])
    size = os.path.getsize(t.path)
    footer_len, = struct.unpack("<I", open(t.path, "rb").read()[-12:-8])
    assert t.stats()["unit_count"] == (size - footer_len) // BLOCK


def test_zero_length_keys_sort_first(tmp_path):
    t = make_table(tmp_path, 17, [(b"", b"empty"), (b"a", b"1")])
    assert t.read_entry(CursorOffset(0, 0)) == KVEntry(b"", b"empty")
    assert t.smallest_key == b""


def test_tombstones_round_trip(tmp_path):
    t = make_table(tmp_path, 18, [(b"dead", None), (b"live", b"v")])
    entries = list(t.entries())
    assert entries[0].is_tombstone
    assert entries[0].value is None
    assert not entries[1].is_tombstone
