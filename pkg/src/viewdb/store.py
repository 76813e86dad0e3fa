"""Top-level embedded store.

Layout of a store directory:

    MANIFEST      append-only version-edit log (see manifest.py)
    wal.<gen>     write-ahead log (see wal.py)
    <id>.tbl      immutable sorted-run table files
    <id>.rmx      persisted sorted-view index, one live per partition

Reads consult the active MemTable, then the immutable MemTable, then the
partition covering the key. Writes append to the WAL before touching the
MemTable and are acknowledged only after the log write returns. Flush
freezes the active MemTable, compacts each partition's staged slice per
the planner's decision, installs the resulting partitions with a single
manifest commit, reinserts excluded/aborted data, and garbage-collects
the WAL. Versions are immutable; readers pin one for their lifetime and
files are deleted only when no live version references them.
"""
from __future__ import annotations

import os
import threading
from bisect import bisect_left, bisect_right
from concurrent.futures import ThreadPoolExecutor
from typing import Iterator, Optional

from . import compact, manifest as mf
from .cache import CacheSet
from .config import StoreConfig
from .errors import CorruptionError, LogFullError, StoreBusy
from .fio import FileOps
from .instrument import CompareStats
from .memtable import MemTable
from .table import KVEntry, TableFile, table_file_name
from .view import SortedView, open_view, view_file_name
from .wal import Wal, WalRecord, recover as wal_recover


class Partition:
    __slots__ = ("pid", "lower", "tables", "view", "view_id")

    def __init__(self, pid: int, lower: bytes, tables: list[TableFile],
                 view: SortedView | None, view_id: int | None):
        self.pid = pid
        self.lower = lower
        self.tables = tables
        self.view = view
        self.view_id = view_id

    def files(self) -> set[str]:
        out = {t.path for t in self.tables}
        if self.view_id is not None:
            out.add(view_file_name(self.view_id))
        return out


class StoreVersion:
    __slots__ = ("seq", "partitions", "lowers", "pins", "retired")

    def __init__(self, seq: int, partitions: list[Partition]):
        self.seq = seq
        self.partitions = sorted(partitions, key=lambda p: p.lower)
        self.lowers = [p.lower for p in self.partitions]
        self.pins = 0
        self.retired = False

    def partition_for(self, key: bytes) -> Partition:
        return self.partitions[bisect_right(self.lowers, key) - 1]

    def file_names(self) -> set[str]:
        out = set()
        for p in self.partitions:
            for t in p.tables:
                out.add(os.path.basename(t.path))
            if p.view_id is not None:
                out.add(view_file_name(p.view_id))
        return out


def open(directory: str, config: StoreConfig | None = None) -> "Store":
    return Store(directory, config or StoreConfig())


class Store:
    def __init__(self, directory: str, config: StoreConfig):
        self.directory = directory
        self.config = config
        self.fio = FileOps(sync=config.sync_writes)
        self.caches = CacheSet(config.block_cache_bytes,
                               config.decoded_cache_blocks)
        self.user_bytes = 0
        self._mu = threading.RLock()
        self._write_lock = threading.RLock()
        self._id_lock = threading.Lock()
        self._old_versions: list[StoreVersion] = []
        self._closed = False

        os.makedirs(directory, exist_ok=True)
        manifest_path = os.path.join(directory, "MANIFEST")
        fresh = not os.path.exists(manifest_path)
        self._manifest = mf.Manifest(manifest_path, self.fio)
        if fresh:
            pid = 1
            self._manifest.commit(
                [mf.encode_edit(mf.PART_ADD, pid, b""),
                 mf.encode_edit(mf.VIEW_SET, pid, mf.NO_VIEW),
                 mf.encode_edit(mf.WAL_GEN, 1)], 1)
        state = mf.replay(manifest_path)
        self._next_id = state.max_id + 1

        referenced = self._collect_referenced(state)
        self._purge_orphans(referenced)

        partitions = []
        for pid, meta in state.partitions.items():
            tables = [TableFile(os.path.join(directory, table_file_name(t)),
                                self.caches) for t in meta.table_ids]
            view = None
            if meta.view_id is not None:
                view = open_view(
                    os.path.join(directory, view_file_name(meta.view_id)),
                    tables, config.in_group_binary_search)
            partitions.append(Partition(pid, meta.lower, tables, view,
                                        meta.view_id))
        self._version = StoreVersion(state.version_seq, partitions)

        wal_path = os.path.join(directory, f"wal.{state.wal_gen}")
        self._wal, self._active = wal_recover(wal_path, self.fio,
                                              config.max_log_bytes)
        self._immutable: MemTable | None = None

    # -- bookkeeping ------------------------------------------------------------

    def _collect_referenced(self, state: mf.ManifestState) -> set[str]:
        names = {"MANIFEST", f"wal.{state.wal_gen}"}
        for meta in state.partitions.values():
            for t in meta.table_ids:
                names.add(table_file_name(t))
            if meta.view_id is not None:
                names.add(view_file_name(meta.view_id))
        return names

    def _purge_orphans(self, referenced: set[str]) -> None:
        present = set(os.listdir(self.directory))
        missing = referenced - present
        if missing:
            raise CorruptionError(
                f"manifest references missing files: {sorted(missing)}")
        for name in present - referenced:
            if name.endswith(".tbl") or name.endswith(".rmx"):
                self.fio.delete(os.path.join(self.directory, name))

    def _allocate_id(self) -> int:
        with self._id_lock:
            i = self._next_id
            self._next_id += 1
            return i

    def _pin_state(self):
        with self._mu:
            version = self._version
            version.pins += 1
            return self._active, self._immutable, version

    def _unpin(self, version: StoreVersion) -> None:
        with self._mu:
            version.pins -= 1
            run_gc = version.retired and version.pins == 0
        if run_gc:
            self._file_gc()

    def _file_gc(self) -> None:
        with self._mu:
            self._old_versions = [v for v in self._old_versions if v.pins > 0]
            live = self._version.file_names()
            for v in self._old_versions:
                live |= v.file_names()
            doomed = [n for n in os.listdir(self.directory)
                      if (n.endswith(".tbl") or n.endswith(".rmx"))
                      and n not in live]
        for name in doomed:
            self.fio.delete(os.path.join(self.directory, name))

    # -- single-key operations -----------------------------------------------------

    def set(self, key: bytes, value: bytes) -> None:
        self.write_batch([(key, value)])

    def delete(self, key: bytes) -> None:
        self.write_batch([(key, None)])

    def write_batch(self, ops: list[tuple[bytes, Optional[bytes]]]) -> None:
        """Apply updates atomically-enough: acknowledged (returns) only
        after the WAL write; deletions pass value None."""
        with self._write_lock:
            records = []
            overlay: dict[bytes, int] = {}
            for key, value in ops:
                base = overlay.get(key)
                if base is None:
                    cell = self._active.get(key)
                    base = cell[1] if cell else 0
                count = min(base + 1, 255)
                overlay[key] = count
                records.append(WalRecord(key, value, count))
            try:
                self._wal.append(records)
            except LogFullError:
                if self._immutable is not None and not self.config.auto_flush:
                    raise StoreBusy("WAL full and an immutable MemTable is "
                                    "pending") from None
                self.flush()
                self._wal.append(records)
            with self._mu:
                for rec in records:
                    self._active.put_with_count(rec.key, rec.value, rec.count)
            self.user_bytes += sum(
                len(r.key) + (len(r.value) if r.value is not None else 0)
                for r in records)
            if (self.config.auto_flush
                    and self._active.approx_bytes >= self.config.memtable_bytes):
                self.flush()

    def get(self, key: bytes) -> Optional[bytes]:
        active, immutable, version = self._pin_state()
        try:
            with self._mu:
                cell = active.get(key)
                if cell is None and immutable is not None:
                    cell = immutable.get(key)
            if cell is not None:
                return cell[0]  # None here = tombstone = not found
            part = version.partition_for(key)
            if part.view is None:
                return None
            entry = part.view.point_get(key)
            if entry is None or entry.is_tombstone:
                return None
            return entry.value
        finally:
            self._unpin(version)

    # -- range scans -------------------------------------------------------------

    def range_seek(self, target: bytes) -> "StoreIterator":
        active, immutable, version = self._pin_state()
        return StoreIterator(self, active, immutable, version, target)

    # -- flush / compaction ---------------------------------------------------------

    def freeze_active(self) -> None:
        """Seal the active MemTable; a fresh one takes over writes."""
        with self._mu:
            if self._immutable is not None:
                raise StoreBusy("an immutable MemTable is already pending")
            self._active.seal()
            self._immutable = self._active
            self._active = MemTable()

    def flush(self) -> None:
        """Freeze (if needed) and move the immutable MemTable into the
        partitions, then garbage-collect the WAL."""
        with self._write_lock:
            if self._immutable is None:
                if len(self._active) == 0:
                    return
                self.freeze_active()
            self._flush_immutable()

    def _flush_immutable(self) -> None:
        imm = self._immutable
        version = self._version
        staged_all = list(imm.items())
        keys = [k for k, _, _ in staged_all]

        slices: dict[int, list] = {}
        parts_by_pid = {}
        for i, part in enumerate(version.partitions):
            parts_by_pid[part.pid] = part
            start = bisect_left(keys, part.lower)
            end = (bisect_left(keys, version.lowers[i + 1])
                   if i + 1 < len(version.partitions) else len(keys))
            if end > start:
                slices[part.pid] = staged_all[start:end]

        plans = []
        for pid, sl in slices.items():
            part = parts_by_pid[pid]
            sbytes = compact.staged_size(sl)
            avg_klen = sum(len(k) for k, _, _ in sl) / len(sl)
            wa, decision, k = compact.estimate_wa(
                [t.file_size for t in part.tables],
                [t.entry_count for t in part.tables],
                sbytes, len(sl), avg_klen, self.config)
            plans.append(compact.CompactionPlan(
                pid, decision, input_count=k, staged_bytes=sbytes,
                estimated_wa=wa))
        compact.global_schedule(plans, self.config)

        ctx = compact.CompactionContext(self.directory, self.config,
                                        self.fio, self.caches,
                                        self._allocate_id)
        to_run = [p for p in plans if p.decision != compact.ABORT]
        results: dict[int, list | None] = {}

        def run_one(plan):
            part = parts_by_pid[plan.pid]
            return plan.pid, compact.execute_compaction(
                plan, slices[plan.pid], part.lower, part.tables, ctx)

        if self.config.compaction_workers > 1 and len(to_run) > 1:
            with ThreadPoolExecutor(self.config.compaction_workers) as pool:
                for pid, res in pool.map(run_one, to_run):
                    results[pid] = res
        else:
            for plan in to_run:
                pid, res = run_one(plan)
                results[pid] = res

        edits = []
        replacements: dict[int, list] = {}
        for plan in to_run:
            res = results.get(plan.pid)
            if res is None:
                continue
            replacements[plan.pid] = res
            edits.append(mf.encode_edit(mf.PART_DEL, plan.pid))
            for np in res:
                edits.append(mf.encode_edit(mf.PART_ADD, np.pid, np.lower))
                for t in np.tables:
                    edits.append(mf.encode_edit(mf.TABLE_ADD, np.pid,
                                                t.table_id))
                edits.append(mf.encode_edit(
                    mf.VIEW_SET, np.pid,
                    np.view_id if np.view_id is not None else mf.NO_VIEW))

        if edits:
            new_parts = []
            for part in version.partitions:
                if part.pid in replacements:
                    for np in replacements[part.pid]:
                        new_parts.append(Partition(np.pid, np.lower, np.tables,
                                                   np.view, np.view_id))
                else:
                    new_parts.append(part)
            seq = version.seq + 1
            self._manifest.commit(edits, seq)  # atomicity point
            with self._mu:
                old = self._version
                self._version = StoreVersion(seq, new_parts)
                old.retired = True
                self._old_versions.append(old)

        with self._mu:
            for plan in plans:
                if plan.decision == compact.ABORT:
                    for k, v, c in slices[plan.pid]:
                        self._active.restore(k, v, c)
                else:
                    for k, v, c in plan.excluded_keys:
                        self._active.reinsert_excluded(k, v, c)
            live = self._active

        self._wal.collect_garbage(lambda key: key in live)
        with self._mu:
            self._immutable = None
        self._file_gc()

    # -- stats / lifecycle -----------------------------------------------------------

    def wa_ratio(self) -> Optional[float]:
        if self.user_bytes == 0:
            return None
        return self.fio.bytes_written / self.user_bytes

    def stats(self) -> dict:
        with self._mu:
            version = self._version
            return {
                "bytes_written": self.fio.bytes_written,
                "user_bytes": self.user_bytes,
                "wa_ratio": self.wa_ratio(),
                "partitions": len(version.partitions),
                "tables": sum(len(p.tables) for p in version.partitions),
                "memtable_bytes": self._active.approx_bytes,
            }

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._wal.close()
        self._manifest.close()
        for v in [self._version] + self._old_versions:
            for p in v.partitions:
                for t in p.tables:
                    t.close()


class _MemCursor:
    """Forward cursor over a MemTable reference; re-seeks through the lock
    so concurrent writes to the active table cannot corrupt iteration."""

    def __init__(self, store: Store, mem: MemTable | None, start: bytes):
        self._store = store
        self._mem = mem
        self._cur: tuple | None = None
        if mem is not None:
            self._seek(start, inclusive=True)
        else:
            self._cur = None

    def _seek(self, minimum: bytes, inclusive: bool) -> None:
        with self._store._mu:
            m = self._mem._map
            for k in m.irange(minimum=minimum, inclusive=(inclusive, True)):
                cell = m[k]
                self._cur = (k, cell[0])
                return
            self._cur = None

    def key(self) -> Optional[bytes]:
        return self._cur[0] if self._cur else None

    def value(self) -> Optional[bytes]:
        return self._cur[1]

    def advance(self) -> None:
        if self._cur is not None:
            self._seek(self._cur[0], inclusive=False)


class _PartitionCursor:
    """Chains the partitions' view iterators in key order."""

    def __init__(self, version: StoreVersion, target: bytes):
        self._parts = version.partitions
        self._idx = bisect_right(version.lowers, target) - 1
        self._it = None
        self._position(target)

    def _position(self, target: bytes) -> None:
        while self._idx < len(self._parts):
            part = self._parts[self._idx]
            if part.view is not None:
                it = part.view.seek(target)
                if it.valid:
                    self._it = it
                    return
            self._idx += 1
            if self._idx < len(self._parts):
                target = self._parts[self._idx].lower
        self._it = None

    def key(self) -> Optional[bytes]:
        return self._it.key() if self._it is not None else None

    def entry(self) -> KVEntry:
        return self._it.peek()

    def advance(self) -> None:
        if self._it is None:
            return
        if not self._it.next():
            self._idx += 1
            if self._idx < len(self._parts):
                self._position(self._parts[self._idx].lower)
            else:
                self._it = None


class StoreIterator:
    """Merges the two MemTables and the partition chain; recency order is
    active > immutable > partitions, and tombstones suppress output. Pins
    the store version for its lifetime."""

    def __init__(self, store: Store, active: MemTable,
                 immutable: MemTable | None, version: StoreVersion,
                 target: bytes):
        self._store = store
        self._version = version
        self._released = False
        self._a = _MemCursor(store, active, target)
        self._i = _MemCursor(store, immutable, target)
        self._t = _PartitionCursor(version, target)

    def next(self) -> Optional[KVEntry]:
        """The next live entry, or None when exhausted."""
        while True:
            ka, ki, kt = self._a.key(), self._i.key(), self._t.key()
            lowest = None
            for k in (ka, ki, kt):
                if k is not None and (lowest is None or k < lowest):
                    lowest = k
            if lowest is None:
                self.close()
                return None
            if ka == lowest:
                entry = KVEntry(lowest, self._a.value())
            elif ki == lowest:
                entry = KVEntry(lowest, self._i.value())
            else:
                entry = self._t.entry()
            if ka == lowest:
                self._a.advance()
            if ki == lowest:
                self._i.advance()
            if kt == lowest:
                self._t.advance()
            if entry.value is None:
                continue
            return entry

    def __iter__(self) -> Iterator[KVEntry]:
        while True:
            e = self.next()
            if e is None:
                return
            yield e

    def close(self) -> None:
        if not self._released:
            self._released = True
            self._store._unpin(self._version)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
