import os
import random
import shutil

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viewdb.errors import CapacityError, LogFullError, MemTableSealedError
from viewdb.fio import FaultPlan, FileOps, SimulatedCrash
from viewdb.memtable import MemTable
from viewdb.wal import (BLOCK, MAPPING_BIT, Wal, WalRecord, encode_record,
                        recover, replay)


# -- MemTable ----------------------------------------------------------------

def test_first_put_counts_one():
    m = MemTable()
    assert m.put(b"k", b"v") == 1
    assert m.get(b"k") == (b"v", 1)


def test_counter_saturates_at_255():
    m = MemTable()
    for _ in range(300):
        m.put(b"k", b"v")
    assert m.get(b"k")[1] == 255


def test_delete_is_a_counted_tombstone():
    m = MemTable()
    m.put(b"k", b"v")
    m.put(b"k", None)
    value, count = m.get(b"k")
    assert value is None and count == 2


def test_reinsert_excluded_absent_key_halves():
    m = MemTable()
    m.reinsert_excluded(b"hot", b"v", 10)
    assert m.get(b"hot") == (b"v", 5)


def test_reinsert_excluded_keeps_newer_value_sums_counts():
    m = MemTable()
    m.put_with_count(b"hot", b"newer", 3)
    m.reinsert_excluded(b"hot", b"older", 10)
    assert m.get(b"hot") == (b"newer", 8)


def test_reinsert_excluded_floors_to_zero():
    m = MemTable()
    m.reinsert_excluded(b"h", b"v", 1)
    assert m.get(b"h") == (b"v", 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["put", "reinsert"]),
                          st.integers(0, 255)), max_size=40))
def test_counter_arithmetic_matches_scalar_model(ops):
    m = MemTable()
    model = None  # count or None
    for op, arg in ops:
        if op == "put":
            m.put(b"k", b"v")
            model = min((model or 0) + 1, 255)
        else:
            m.reinsert_excluded(b"k", b"x", arg)
            if model is None:
                model = arg // 2
            else:
                model = min(model + arg // 2, 255)
    got = m.get(b"k")
    assert (got[1] if got else None) == model


def test_sealed_memtable_rejects_writes():
    m = MemTable()
    m.put(b"a", b"1")
    m.seal()
    with pytest.raises(MemTableSealedError):
        m.put(b"b", b"2")
    assert m.get(b"a") == (b"1", 1)  # reads still fine


def test_ordered_iteration():
    m = MemTable()
    for k in [b"c", b"a", b"b"]:
        m.put(k, k)
    assert [k for k, _, _ in m.items()] == [b"a", b"b", b"c"]
    assert [k for k, _, _ in m.items_from(b"b")] == [b"b", b"c"]


# -- WAL ----------------------------------------------------------------------

def wal_path(tmp_path):
    return str(tmp_path / "wal.1")


def data_blocks(path):
    """Physical blocks currently holding records (non-mapping, non-empty)."""
    from viewdb.wal import _read_blocks
    return [i for i, b in enumerate(_read_blocks(path))
            if not b[0] & MAPPING_BIT and (b[1] or b[2])]


def recovered_state(path):
    """key -> (value, count) after replaying the log."""
    state = {}
    for _, _, rec, _ in replay(path):
        state[rec.key] = (rec.value, rec.count)
    return state


def test_single_record_round_trip(tmp_path):
    p = wal_path(tmp_path)
    wal, _ = recover(p)
    wal.append([WalRecord(b"k", b"v", 1)])
    wal.close()
    wal2, mem = recover(p)
    assert mem.get(b"k") == (b"v", 1)
    wal2.close()


def test_9kb_of_records_pack_into_three_blocks(tmp_path):
    records = [WalRecord(b"%04d" % i, b"x" * 1500, 1) for i in range(6)]
    sizes = [len(encode_record(r)) for r in records]
    assert sum(sizes) > 9000
    # first-fit model over the 4093-byte block payload
    blocks, used = 1, 0
    for s in sizes:
        if used + s > BLOCK - 3:
            blocks += 1
            used = 0
        used += s
    p = wal_path(tmp_path)
    wal, _ = recover(p)
    wal.append(records)
    assert len(data_blocks(p)) == blocks == 3
    wal.close()


def test_deletions_and_counts_survive_recovery(tmp_path):
    p = wal_path(tmp_path)
    wal, _ = recover(p)
    wal.append([WalRecord(b"a", b"1", 1), WalRecord(b"b", b"2", 1)])
    wal.append([WalRecord(b"a", None, 2)])
    wal.close()
    _, mem = recover(p)
    assert mem.get(b"a") == (None, 2)
    assert mem.get(b"b") == (b"2", 1)


def test_oversized_record_rejected(tmp_path):
    wal, _ = recover(wal_path(tmp_path))
    with pytest.raises(CapacityError):
        wal.append([WalRecord(b"k", b"x" * 5000, 1)])
    wal.close()


def test_log_full_raises(tmp_path):
    wal, _ = recover(wal_path(tmp_path), max_bytes=4 * BLOCK)
    big = b"x" * 3000
    wal.append([WalRecord(b"a", big, 1)])
    wal.append([WalRecord(b"b", big, 1)])
    wal.append([WalRecord(b"c", big, 1)])
    with pytest.raises(LogFullError):
        wal.append([WalRecord(b"d", big, 1)])
    wal.close()


def test_gc_remaps_fully_live_block_without_rewrite(tmp_path):
    p = wal_path(tmp_path)
    wal, _ = recover(p)
    wal.append([WalRecord(b"%02d" % i, b"v" * 50, 1) for i in range(10)])
    stats = wal.collect_garbage(lambda k: True)
    assert stats["remapped_blocks"] == 1
    assert stats["rewritten_bytes"] == 0
    assert len(recovered_state(p)) == 10
    wal.close()


def _exact_quarter_setup(tmp_path, exact: bool):
    # live record: 102 encoded bytes. exact: used = 408 (102*4);
    # just-below: a 103-byte record pushes used to 409.
    p = wal_path(tmp_path)
    wal, _ = recover(p)
    recs = [WalRecord(b"live%04d" % 0, b"v" * 90, 1)]
    for i in range(1, 4):
        pad = 90 if exact else (91 if i == 3 else 90)
        recs.append(WalRecord(b"dead%04d" % i, b"v" * pad, 1))
    assert len(encode_record(recs[0])) == 102
    wal.append(recs)
    return p, wal


def test_gc_boundary_exactly_quarter_is_remapped(tmp_path):
    p, wal = _exact_quarter_setup(tmp_path, exact=True)
    stats = wal.collect_garbage(lambda k: k.startswith(b"live"))
    assert stats["remapped_blocks"] == 1
    assert stats["rewritten_records"] == 0
    assert set(recovered_state(p)) == {b"live0000"}
    wal.close()


def test_gc_boundary_below_quarter_is_rewritten(tmp_path):
    p, wal = _exact_quarter_setup(tmp_path, exact=False)
    stats = wal.collect_garbage(lambda k: k.startswith(b"live"))
    assert stats["remapped_blocks"] == 0
    assert stats["rewritten_records"] == 1
    assert stats["rewritten_bytes"] == 102
    assert stats["dropped_blocks"] == 1
    assert set(recovered_state(p)) == {b"live0000"}
    wal.close()


def test_gc_preserves_live_set_with_counters(tmp_path):
    p = wal_path(tmp_path)
    wal, _ = recover(p)
    rng = random.Random(3)
    keys = [b"k%03d" % i for i in range(60)]
    for _ in range(200):
        k = rng.choice(keys)
        wal.append([WalRecord(k, b"v%03d" % rng.randint(0, 999), rng.randint(1, 255))])
    before = recovered_state(p)
    live = set(rng.sample(keys, 30))
    wal.collect_garbage(lambda k: k in live)
    after = recovered_state(p)
    assert after == {k: v for k, v in before.items() if k in live}
    # appends keep working after GC and land in reclaimed slots
    wal.append([WalRecord(b"post", b"gc", 1)])
    assert recovered_state(p)[b"post"] == (b"gc", 1)
    wal.close()


def test_flip_bit_inverts_when_block_is_reused(tmp_path):
    p = wal_path(tmp_path)
    wal, _ = recover(p)
    wal.append([WalRecord(b"x", b"1", 1)])
    blk = data_blocks(p)[0]
    old_flips = [b[0] & 1 for b in __import__("viewdb.wal", fromlist=["_read_blocks"])._read_blocks(p)]
    wal.collect_garbage(lambda k: False)  # everything dead -> all blocks freed
    # two oversized records force appends through both freed slots
    wal.append([WalRecord(b"y", b"2" * 3000, 1), WalRecord(b"z", b"3" * 3000, 1)])
    reused = data_blocks(p)
    assert blk in reused, "the dead data block must be reused"
    new_flips = [b[0] & 1 for b in __import__("viewdb.wal", fromlist=["_read_blocks"])._read_blocks(p)]
    for phys in reused:
        assert new_flips[phys] == old_flips[phys] ^ 1
    assert set(recovered_state(p)) == {b"y", b"z"}
    wal.close()


def test_crash_mid_gc_keeps_old_virtual_log(tmp_path):
    p = wal_path(tmp_path)
    fio = FileOps()
    wal, _ = recover(p, fio)
    wal.append([WalRecord(b"%02d" % i, b"v" * 50, 1) for i in range(10)])
    before = recovered_state(p)
    # all blocks stay fully live -> GC's only write is the new mapping chunk
    fio.fault = FaultPlan(1)
    with pytest.raises(SimulatedCrash):
        wal.collect_garbage(lambda k: True)
    fio.fault = None
    wal.close()
    wal2, mem = recover(p)
    assert recovered_state(p) == before
    assert {k: (v, c) for k, v, c in mem.items()} == before
    wal2.close()


def test_stale_slot_with_flip_mismatch_is_skipped(tmp_path):
    p = wal_path(tmp_path)
    fio = FileOps()
    wal, _ = recover(p, fio)
    wal.append([WalRecord(b"old", b"1", 1)])
    wal.collect_garbage(lambda k: False)  # "old" block becomes a free slot
    # crash after the record payload lands but before the header publishes it
    fio.fault = FaultPlan(2)
    with pytest.raises(SimulatedCrash):
        wal.append([WalRecord(b"new", b"2", 1)])
    wal.close()
    _, mem = recover(p)
    assert mem.get(b"new") is None, "unpublished slot must read as unwritten"
    assert mem.get(b"old") is None


def test_acknowledged_appends_survive_100_kill_points(tmp_path):
    rng = random.Random(11)
    script = []
    for i in range(40):
        batch = [WalRecord(b"key%03d" % rng.randint(0, 30),
                           b"val%05d" % rng.randint(0, 99999),
                           rng.randint(1, 255))
                 for _ in range(rng.randint(1, 4))]
        script.append(("append", batch))
        if i in (15, 30):
            script.append(("gc", None))

    def run(fault: FaultPlan | None, root):
        os.makedirs(root, exist_ok=True)
        fio = FileOps()
        wal, _ = recover(os.path.join(root, "wal.1"), fio)
        fio.fault = fault
        acked = {}
        try:
            for op, arg in script:
                if op == "append":
                    wal.append(arg)
                    for rec in arg:
                        acked[rec.key] = (rec.value, rec.count)
                else:
                    wal.collect_garbage(lambda k: True)
        except SimulatedCrash:
            pass
        finally:
            fio.fault = None
            wal.close()
        return acked

    clean_fio = FileOps()
    probe = os.path.join(str(tmp_path), "probe")
    os.makedirs(probe)
    wal, _ = recover(os.path.join(probe, "wal.1"), clean_fio)
    for op, arg in script:
        wal.append(arg) if op == "append" else wal.collect_garbage(lambda k: True)
    total_ops = clean_fio.write_ops
    wal.close()

    points = sorted(rng.sample(range(1, total_ops + 1), min(100, total_ops)))
    for i, k in enumerate(points):
        root = os.path.join(str(tmp_path), f"kill{i}")
        acked = run(FaultPlan(k, partial_fraction=rng.choice([0.0, 0.5])), root)
        state = recovered_state(os.path.join(root, "wal.1"))
        for key, want in acked.items():
            assert state.get(key) == want, f"kill point {k}: lost {key!r}"


def test_recovery_of_empty_or_missing_log(tmp_path):
    p = wal_path(tmp_path)
    wal, mem = recover(p)
    assert len(mem) == 0
    wal.close()
    # garbage shorter than one block -> fresh log
    open(p, "wb").write(b"junk")
    wal2, mem2 = recover(p)
    assert len(mem2) == 0
    wal2.close()
