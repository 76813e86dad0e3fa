"""Persisted sorted view over overlapping sorted runs.

A view records, for the globally sorted sequence of all entries in R runs
(ties between runs ordered newest run first), one byte-sized run selector
per position, cut into groups of D positions. Each group carries:

  * anchor key   — the user key at the group's first position,
  * cursor offsets — for every run, its cursor after seeking the anchor
                     (i.e. the first position in that run >= anchor),
  * D selectors  — low 7 bits name the run; bit 7 marks the newest
                   version of a user key; 0x7f is a trailing placeholder.

A version sequence of one key never spans a group boundary: the previous
group is padded with placeholders instead, so an anchor always addresses
a newest version. Any position is randomly accessible by counting the
occurrences of its selector earlier in the group and advancing that run's
cursor as many times — no per-position location is stored.

File layout (.rmx, little-endian):

    [magic 8B][format u32][R u8][D u8][group_count u32]
    [R x u64 run table ids]
    groups: per group R x (u16 blk_id + u8 key_id), then D selector bytes
    anchor index: per group [u32 klen][key][u32 group ordinal],
                  then a directory of group_count u32 entry offsets
    [crc32 over everything above]
"""
from __future__ import annotations

import struct
import zlib
from array import array
from itertools import chain, repeat
from typing import Iterator, NamedTuple, Optional

from .errors import AddressingError, BindingError, CapacityError, CorruptionError
from .fio import FileOps
from .instrument import CompareStats
from .table import EXHAUSTED, CursorOffset, KVEntry, TableFile

MAGIC = b"SVIEW001"
FORMAT_VERSION = 1
PLACEHOLDER = 0x7F
NEWEST_BIT = 0x80
_EXH_PACKED = (0xFFFF << 8) | 0xFF

_HDR = struct.Struct("<8sIBBI")
_CUR = struct.Struct("<HB")
_DEFAULT_STATS = CompareStats()


class Group(NamedTuple):
    anchor_key: bytes
    cursor_offsets: tuple[CursorOffset, ...]
    selectors: bytes


def view_file_name(view_id: int) -> str:
    return f"{view_id:016x}.rmx"


def predict_file_bytes(key_count: int, avg_key_len: float, run_count: int,
                       group_capacity: int) -> int:
    """Expected .rmx size for this file format (3-byte cursors, 1-byte
    selectors, 12 bytes of anchor-index overhead per group)."""
    if key_count == 0:
        return 26 + 8 * run_count
    groups = -(-key_count // group_capacity)
    per_group = 3 * run_count + group_capacity + avg_key_len + 12
    return int(groups * per_group) + 26 + 8 * run_count


class SortedView:
    """Immutable, shareable index over `runs` (ordered oldest to newest)."""

    __slots__ = ("runs", "R", "D", "group_count", "anchors", "sel_blob",
                 "off_arr", "in_group_binary_search")

    def __init__(self, runs: list[TableFile], D: int, anchors: list[bytes],
                 sel_blob: bytes, off_arr: array,
                 in_group_binary_search: bool = True):
        self.runs = list(runs)
        self.R = len(runs)
        self.D = D
        self.anchors = anchors
        self.sel_blob = sel_blob
        self.off_arr = off_arr
        self.group_count = len(anchors)
        self.in_group_binary_search = in_group_binary_search

    # -- group access --------------------------------------------------------

    def group(self, g: int) -> Group:
        base = g * self.R
        offs = tuple(
            CursorOffset(p >> 8, p & 0xFF) if p != _EXH_PACKED else EXHAUSTED
            for p in self.off_arr[base:base + self.R])
        return Group(self.anchors[g], offs,
                     bytes(self.sel_blob[g * self.D:(g + 1) * self.D]))

    def _count_run(self, run: int, start: int, end: int) -> int:
        blob = self.sel_blob
        return blob.count(run, start, end) + blob.count(run | NEWEST_BIT, start, end)

    def _cursor_at(self, g: int, run: int) -> CursorOffset:
        p = self.off_arr[g * self.R + run]
        return EXHAUSTED if p == _EXH_PACKED else CursorOffset(p >> 8, p & 0xFF)

    def access_group_key(self, g: int, j: int) -> KVEntry:
        """Entry at in-group position j, located purely by counting how many
        times its run's selector occurs before j. Touches only that run."""
        if not 0 <= j < self.D:
            raise AddressingError(f"in-group index {j} out of range")
        base = g * self.D
        s = self.sel_blob[base + j]
        if s == PLACEHOLDER:
            raise AddressingError(f"position {j} of group {g} is a placeholder")
        run = s & 0x7F
        occurrences = self._count_run(run, base, base + j)
        table = self.runs[run]
        off = table.advance_cursor(self._cursor_at(g, run), occurrences)
        return table.read_entry(off)._replace(run=run)

    def _probe_key(self, g: int, j: int) -> bytes:
        base = g * self.D
        run = self.sel_blob[base + j] & 0x7F
        occurrences = self._count_run(run, base, base + j)
        table = self.runs[run]
        off = table.advance_cursor(self._cursor_at(g, run), occurrences)
        return table.read_entry(off).key

    # -- search ---------------------------------------------------------------

    def _anchor_search(self, target: bytes, st: CompareStats) -> int:
        lo, hi = 0, self.group_count
        anchors = self.anchors
        while lo < hi:
            mid = (lo + hi) // 2
            if st.compare(anchors[mid], target) <= 0:
                lo = mid + 1
            else:
                hi = mid
        return max(lo - 1, 0)

    def _in_group_search(self, g: int, target: bytes,
                         st: CompareStats) -> Optional[int]:
        """Smallest in-group position holding a newest version with
        key >= target, or None if every key in the group is smaller."""
        base = g * self.D
        blob = self.sel_blob
        newest = [i for i in range(self.D) if blob[base + i] & NEWEST_BIT]
        if self.in_group_binary_search:
            lo, hi = 0, len(newest) - 1
            probed_ge = False
            while lo < hi:
                mid = (lo + hi) // 2
                if st.compare(self._probe_key(g, newest[mid]), target) < 0:
                    lo = mid + 1
                    probed_ge = False
                else:
                    hi = mid
                    probed_ge = True
            if not probed_ge and st.compare(self._probe_key(g, newest[lo]), target) < 0:
                return None
            return newest[lo]
        for i in newest:
            if st.compare(self._probe_key(g, i), target) >= 0:
                return i
        return None

    def seek(self, target: bytes, stats: CompareStats | None = None,
             masked: bool = True) -> "ViewIterator":
        """One binary search over anchors, one inside the target group."""
        st = stats if stats is not None else _DEFAULT_STATS
        it = ViewIterator(self, masked)
        if self.group_count == 0:
            return it
        g = self._anchor_search(target, st)
        j = self._in_group_search(g, target, st)
        if j is None:
            g += 1
            if g >= self.group_count:
                return it
            j = 0
        it._load(g, j)
        return it

    def point_get(self, key: bytes, stats: CompareStats | None = None
                  ) -> Optional[KVEntry]:
        """Seek plus one equality comparison. The returned entry may be a
        tombstone; None means the key is absent."""
        st = stats if stats is not None else _DEFAULT_STATS
        it = self.seek(key, st)
        if not it.valid:
            return None
        entry = it.peek()
        if st.equal(entry.key, key):
            return entry
        return None

    def first(self, masked: bool = True) -> "ViewIterator":
        it = ViewIterator(self, masked)
        if self.group_count:
            it._load(0, 0)
        return it

    def scan(self, masked: bool = True) -> Iterator[KVEntry]:
        it = self.first(masked)
        while it.valid:
            yield it.peek()
            it.next()

    # -- persistence ------------------------------------------------------------

    def persist(self, path: str, fio: FileOps | None = None) -> None:
        R, D, G = self.R, self.D, self.group_count
        buf = bytearray(_HDR.pack(MAGIC, FORMAT_VERSION, R, D, G))
        for t in self.runs:
            buf += struct.pack("<Q", t.table_id)
        pack_cur = _CUR.pack
        arr = self.off_arr
        blob = self.sel_blob
        for g in range(G):
            base = g * R
            for r in range(R):
                p = arr[base + r]
                buf += pack_cur(p >> 8, p & 0xFF)
            buf += blob[g * D:(g + 1) * D]
        directory = array("I")
        index_start = len(buf)
        for g, anchor in enumerate(self.anchors):
            directory.append(len(buf) - index_start)
            buf += struct.pack("<I", len(anchor)) + anchor + struct.pack("<I", g)
        buf += directory.tobytes()
        buf += struct.pack("<I", zlib.crc32(buf))
        w = (fio or FileOps()).writer(path)
        w.write(bytes(buf))
        w.close()

    def __eq__(self, other):
        if not isinstance(other, SortedView):
            return NotImplemented
        return (self.D == other.D and self.anchors == other.anchors
                and bytes(self.sel_blob) == bytes(other.sel_blob)
                and self.off_arr == other.off_arr
                and [t.table_id for t in self.runs] ==
                    [t.table_id for t in other.runs])

    def __repr__(self):
        return f"<SortedView R={self.R} D={self.D} groups={self.group_count}>"


def build_view(runs: list[TableFile], D: int = 32,
               in_group_binary_search: bool = True) -> SortedView:
    """One merge pass over all runs, newest run first on key ties."""
    R = len(runs)
    if not 1 <= R <= 127:
        raise CapacityError(f"view supports 1..127 runs, got {R}")
    if D < R:
        raise CapacityError(f"group capacity {D} must be >= run count {R}")

    parts = []
    for idx, t in enumerate(runs):
        keys = t.all_keys()
        parts.append(zip(keys, repeat(R - 1 - idx), repeat(idx)))
    merged = sorted(chain.from_iterable(parts))

    anchors: list[bytes] = []
    sel_blob = bytearray()
    off_arr = array("I")
    n = len(merged)
    if n == 0:
        return SortedView(runs, D, anchors, bytes(sel_blob), off_arr,
                          in_group_binary_search)

    if len({t[0] for t in merged}) == n:
        # No duplicate user keys anywhere: every position is a newest
        # version and groups are exact D-sized cuts.
        sel_blob = bytearray(bytes((t[2] | NEWEST_BIT) for t in merged))
        consumed = [0] * R
        for start in range(0, n, D):
            anchors.append(merged[start][0])
            for r in range(R):
                off = runs[r].offset_of_ordinal(consumed[r])
                off_arr.append(_pack_off(off))
            end = min(start + D, n)
            for r in range(R):
                consumed[r] += sel_blob.count(r | NEWEST_BIT, start, end)
        pad = (-n) % D
        sel_blob += bytes([PLACEHOLDER]) * pad
        return SortedView(runs, D, anchors, bytes(sel_blob), off_arr,
                          in_group_binary_search)

    consumed = [0] * R
    group_used = 0
    i = 0
    while i < n:
        key = merged[i][0]
        j = i + 1
        while j < n and merged[j][0] == key:
            j += 1
        batch = j - i
        if batch > 1:
            runs_in_batch = {merged[m][2] for m in range(i, j)}
            if len(runs_in_batch) != batch:
                raise CorruptionError(
                    f"duplicate key {key!r} within a single run")
        if group_used and group_used + batch > D:
            sel_blob += bytes([PLACEHOLDER]) * (D - group_used)
            group_used = 0
        if group_used == 0:
            anchors.append(key)
            for r in range(R):
                off_arr.append(_pack_off(runs[r].offset_of_ordinal(consumed[r])))
        newest = NEWEST_BIT
        for m in range(i, j):
            run = merged[m][2]
            sel_blob.append(run | newest)
            consumed[run] += 1
            newest = 0
        group_used += batch
        if group_used == D:
            group_used = 0
        i = j
    if group_used:
        sel_blob += bytes([PLACEHOLDER]) * (D - group_used)
    return SortedView(runs, D, anchors, bytes(sel_blob), off_arr,
                      in_group_binary_search)


def _pack_off(off: CursorOffset) -> int:
    return (off.blk_id << 8) | off.key_id


def open_view(path: str, runs: list[TableFile],
              in_group_binary_search: bool = True) -> SortedView:
    """Open a persisted view against the same runs; no table data I/O."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HDR.size + 4:
        raise CorruptionError(f"{path}: truncated view file")
    stored_crc = struct.unpack_from("<I", buf, len(buf) - 4)[0]
    if zlib.crc32(buf[:-4]) != stored_crc:
        raise CorruptionError(f"{path}: view checksum mismatch")
    magic, version, R, D, G = _HDR.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptionError(f"{path}: bad view magic")
    if version != FORMAT_VERSION:
        raise CorruptionError(f"{path}: unsupported format {version}")
    if R != len(runs):
        raise BindingError(f"{path}: view indexes {R} runs, got {len(runs)}")
    off = _HDR.size
    ids = struct.unpack_from(f"<{R}Q", buf, off)
    off += 8 * R
    actual = tuple(t.table_id for t in runs)
    if ids != actual:
        raise BindingError(
            f"{path}: run ids {list(ids)} do not match supplied {list(actual)}")

    off_arr = array("I")
    sel_parts = []
    for _ in range(G):
        for _ in range(R):
            blk, key = _CUR.unpack_from(buf, off)
            off += 3
            off_arr.append((blk << 8) | key)
        sel_parts.append(buf[off:off + D])
        off += D
    sel_blob = b"".join(sel_parts)

    anchors = []
    for _ in range(G):
        klen = struct.unpack_from("<I", buf, off)[0]
        off += 4
        anchors.append(buf[off:off + klen])
        off += klen + 4  # skip the stored group ordinal
    off += 4 * G  # directory
    if off + 4 != len(buf):
        raise CorruptionError(f"{path}: trailing bytes in view file")
    return SortedView(runs, D, anchors, sel_blob, off_arr,
                      in_group_binary_search)


class ViewIterator:
    """Forward iterator: a current position in the selector sequence plus
    one cursor per run. Advancing performs zero key comparisons; with
    masking on (the default) old versions are skipped via selector bits."""

    __slots__ = ("view", "masked", "valid", "gi", "si", "cb", "ck",
                 "_counts", "_next", "_runs", "_blob", "_D")

    def __init__(self, view: SortedView, masked: bool = True):
        self.view = view
        self.masked = masked
        self.valid = False
        self.gi = 0
        self.si = 0
        self.cb = [0xFFFF] * view.R
        self.ck = [0xFF] * view.R
        self._runs = view.runs
        self._counts = [t.counts for t in view.runs]
        self._next = [t._next_head for t in view.runs]
        self._blob = view.sel_blob
        self._D = view.D

    def _reload_group(self) -> None:
        base = self.gi * self.view.R
        arr = self.view.off_arr
        cb, ck = self.cb, self.ck
        for r in range(self.view.R):
            p = arr[base + r]
            cb[r] = p >> 8
            ck[r] = p & 0xFF

    def _advance1(self, r: int) -> None:
        b = self.cb[r]
        if b == 0xFFFF:
            return
        k = self.ck[r] + 1
        if k < self._counts[r][b]:
            self.ck[r] = k
            return
        nb = self._next[r][b]
        if nb == -1:
            self.cb[r] = 0xFFFF
            self.ck[r] = 0xFF
        else:
            self.cb[r] = nb
            self.ck[r] = 0

    def _load(self, g: int, j: int) -> None:
        """Position at group g, in-group index j; cursors are the group's
        recorded offsets advanced by each run's selector occurrences in
        positions [0, j)."""
        self.gi = g
        self.si = j
        self._reload_group()
        if j:
            view = self.view
            base = g * self._D
            for r in range(view.R):
                if self.cb[r] == 0xFFFF:
                    continue
                c = view._count_run(r, base, base + j)
                if c:
                    off = view.runs[r].advance_cursor(
                        CursorOffset(self.cb[r], self.ck[r]), c)
                    self.cb[r], self.ck[r] = off
        self.valid = True

    def next(self) -> bool:
        """Advance to the next visible position; no key comparisons."""
        if not self.valid:
            return False
        blob = self._blob
        D = self._D
        self._advance1(blob[self.gi * D + self.si] & 0x7F)
        masked = self.masked
        while True:
            self.si += 1
            if self.si == D:
                self.gi += 1
                if self.gi >= self.view.group_count:
                    self.valid = False
                    return False
                self._reload_group()
                self.si = 0
            s = blob[self.gi * D + self.si]
            if s == PLACEHOLDER:
                self.si = D - 1  # placeholders are a trailing suffix
                continue
            if masked and not s & NEWEST_BIT:
                self._advance1(s & 0x7F)
                continue
            return True

    def peek(self) -> Optional[KVEntry]:
        if not self.valid:
            return None
        r = self._blob[self.gi * self._D + self.si] & 0x7F
        entry = self._runs[r].decode_block(self.cb[r])[self.ck[r]]
        return entry._replace(run=r)

    def key(self) -> Optional[bytes]:
        if not self.valid:
            return None
        r = self._blob[self.gi * self._D + self.si] & 0x7F
        return self._runs[r].decode_block(self.cb[r])[self.ck[r]].key

    def is_newest(self) -> bool:
        return bool(self._blob[self.gi * self._D + self.si] & NEWEST_BIT)

    def cursors(self) -> list[CursorOffset]:
        return [EXHAUSTED if b == 0xFFFF else CursorOffset(b, k)
                for b, k in zip(self.cb, self.ck)]
