"""Immutable sorted-run table files.

On-disk layout (all integers little-endian):

    ┌────────────────────────────────────────────────┐
    │ data block 0 (4 KB)                            │
    │   [n x u16 entry offsets][entries ...]         │
    ├────────────────────────────────────────────────┤
    │ ... more 4 KB data blocks / jumbo blocks ...   │
    ├────────────────────────────────────────────────┤
    │ footer:                                        │
    │   [metadata: 1 byte key-count per 4 KB unit]   │
    │   [entry_count u32][unit_count u32]            │
    │   [bounds: u8 present, len-prefixed keys]      │
    │   [crc32 of the above][footer_len u32][magic]  │
    └────────────────────────────────────────────────┘

    entry = [1B flags: bit0 tombstone][uvarint klen][uvarint vlen]
            [key][value]            (vlen is 0 for tombstones)

A KV pair that does not fit a 4 KB payload exclusively occupies a jumbo
block spanning k consecutive units; only the head unit has a non-zero
key count, so a non-zero count always marks a block head. The metadata
block alone supports skipping any number of keys with no data I/O.
"""
from __future__ import annotations

import os
import struct
import zlib
from bisect import bisect_right
from itertools import accumulate, chain
from typing import Iterable, Iterator, NamedTuple, Optional

from .cache import BLOCK, CacheSet
from .errors import AddressingError, CapacityError, CorruptionError, OrderingError
from .fio import FileOps

MAGIC = b"RUNTBL01"
MAX_KEYS_PER_UNIT = 255

_U32 = struct.Struct("<I")
_TAIL = struct.Struct("<I8s")  # footer_len, magic


class KVEntry(NamedTuple):
    key: bytes
    value: Optional[bytes] = None  # None = tombstone
    run: Optional[int] = None      # provenance when read through a view

    @property
    def is_tombstone(self) -> bool:
        return self.value is None


class CursorOffset(NamedTuple):
    blk_id: int
    key_id: int


EXHAUSTED = CursorOffset(0xFFFF, 0xFF)


def encode_entry(key: bytes, value: Optional[bytes]) -> bytes:
    buf = bytearray()
    buf.append(1 if value is None else 0)
    _put_uvarint(buf, len(key))
    _put_uvarint(buf, 0 if value is None else len(value))
    buf += key
    if value is not None:
        buf += value
    return bytes(buf)


def _put_uvarint(buf: bytearray, n: int) -> None:
    while n >= 0x80:
        buf.append((n & 0x7F) | 0x80)
        n >>= 7
    buf.append(n)


def _get_uvarint(buf, off: int) -> tuple[int, int]:
    n = 0
    shift = 0
    while True:
        b = buf[off]
        off += 1
        n |= (b & 0x7F) << shift
        if not b & 0x80:
            return n, off
        shift += 7


def _parse_entry(buf, off: int) -> tuple[bytes, Optional[bytes], int]:
    flags = buf[off]
    klen, off = _get_uvarint(buf, off + 1)
    vlen, off = _get_uvarint(buf, off)
    key = bytes(buf[off:off + klen])
    off += klen
    if flags & 1:
        return key, None, off
    value = bytes(buf[off:off + vlen])
    return key, value, off + vlen


def table_id_for_path(path: str) -> int:
    stem = os.path.basename(path).split(".")[0]
    try:
        return int(stem, 16)
    except ValueError:
        return zlib.crc32(path.encode()) | (1 << 40)


def table_file_name(table_id: int) -> str:
    return f"{table_id:016x}.tbl"


class TableWriter:
    """Streams sorted entries into a new table file."""

    def __init__(self, path: str, fio: FileOps | None = None,
                 max_file_size: int = 16 << 20):
        self.path = path
        self.max_file_size = max_file_size
        self._fio = fio or FileOps()
        self._w = self._fio.writer(path)
        self._counts = bytearray()
        self._cur: list[bytes] = []
        self._cur_payload = 0
        self._prev_key: bytes | None = None
        self._smallest: bytes | None = None
        self._largest: bytes | None = None
        self.entry_count = 0

    # -- sizing helpers ----------------------------------------------------

    def _footer_size(self, units: int, largest: bytes) -> int:
        bounds = 1
        if self._smallest is not None or largest is not None:
            s = self._smallest if self._smallest is not None else largest
            bounds += 4 + len(s) + 4 + len(largest)
        return units + 8 + bounds + 16

    def _fits_file(self, units: int, largest: bytes) -> bool:
        return units * BLOCK + self._footer_size(units, largest) <= self.max_file_size

    # -- block assembly ----------------------------------------------------

    def _seal(self) -> None:
        n = len(self._cur)
        if n == 0:
            return
        offs = []
        pos = 2 * n
        for e in self._cur:
            offs.append(pos)
            pos += len(e)
        block = struct.pack(f"<{n}H", *offs) + b"".join(self._cur)
        self._w.write(block + b"\x00" * (BLOCK - len(block)))
        self._counts.append(n)
        self._cur.clear()
        self._cur_payload = 0

    def _write_jumbo(self, entry: bytes) -> None:
        units = -(-(2 + len(entry)) // BLOCK)
        block = struct.pack("<H", 2) + entry
        self._w.write(block + b"\x00" * (units * BLOCK - len(block)))
        self._counts.append(1)
        self._counts += b"\x00" * (units - 1)

    def add(self, key: bytes, value: Optional[bytes]) -> bool:
        """Append one entry. Returns False (without consuming it) when the
        file budget would be exceeded; raises on ordering violations."""
        if self._prev_key is not None and key <= self._prev_key:
            raise OrderingError(
                f"keys out of order: {self._prev_key!r} then {key!r}")
        entry = encode_entry(key, value)
        sealed = len(self._counts)
        pending = 1 if self._cur else 0

        if 2 + len(entry) > BLOCK:  # jumbo
            units = -(-(2 + len(entry)) // BLOCK)
            if not self._fits_file(sealed + pending + units, key):
                if self.entry_count == 0:
                    raise CapacityError(
                        f"entry of {len(entry)} bytes exceeds max_file_size")
                return False
            self._seal()
            self._write_jumbo(entry)
        else:
            n = len(self._cur)
            fits_block = (n < MAX_KEYS_PER_UNIT
                          and 2 * (n + 1) + self._cur_payload + len(entry) <= BLOCK)
            new_units = sealed + pending + (0 if fits_block and pending else 1)
            if not self._fits_file(max(new_units, 1), key):
                if self.entry_count == 0:
                    raise CapacityError(
                        f"entry of {len(entry)} bytes exceeds max_file_size")
                return False
            if not fits_block:
                self._seal()
            self._cur.append(entry)
            self._cur_payload += len(entry)

        self._prev_key = key
        if self._smallest is None:
            self._smallest = key
        self._largest = key
        self.entry_count += 1
        return True

    def finish(self, caches: CacheSet | None = None) -> "TableFile":
        self._seal()
        units = len(self._counts)
        footer = bytearray(self._counts)
        footer += struct.pack("<II", self.entry_count, units)
        if self.entry_count:
            footer.append(1)
            footer += _U32.pack(len(self._smallest)) + self._smallest
            footer += _U32.pack(len(self._largest)) + self._largest
        else:
            footer.append(0)
        crc = zlib.crc32(footer)
        footer += _U32.pack(crc)
        footer += _TAIL.pack(len(footer) + 12, MAGIC)
        self._w.write(bytes(footer))
        self._w.close()
        return TableFile(self.path, caches)

    def abandon(self) -> None:
        self._w.abandon()


def build_table(entries: Iterable[tuple[bytes, Optional[bytes]]], path: str,
                fio: FileOps | None = None, max_file_size: int = 16 << 20,
                caches: CacheSet | None = None,
                ) -> tuple["TableFile", Optional[Iterator]]:
    """Build one table from a sorted (key, value) stream.

    Returns (table, remainder): remainder is an iterator positioned at the
    first unconsumed entry when the file budget stopped the build, else None.
    """
    writer = TableWriter(path, fio, max_file_size)
    it = iter(entries)
    for key, value in it:
        if not writer.add(key, value):
            table = writer.finish(caches)
            return table, chain([(key, value)], it)
    return writer.finish(caches), None


class TableFile:
    """Read handle over an immutable table file.

    Open parses only the footer; data blocks are fetched on demand through
    the shared caches. `touches` counts logical block accesses (cache hits
    included); `disk_reads` counts actual unit reads from the file.
    """

    def __init__(self, path: str, caches: CacheSet | None = None):
        self.path = path
        self.table_id = table_id_for_path(path)
        self.caches = caches or CacheSet()
        self.touches = 0
        self.disk_reads = 0
        self._keys: list[bytes] | None = None

        try:
            self._fd = os.open(path, os.O_RDONLY)
        except OSError as e:
            raise CorruptionError(f"cannot open table {path}: {e}") from e
        try:
            self._parse_footer()
        except CorruptionError:
            os.close(self._fd)
            raise

    def _parse_footer(self) -> None:
        size = os.fstat(self._fd).st_size
        self.file_size = size
        if size < 12:
            raise CorruptionError(f"{self.path}: truncated (no tail)")
        footer_len, magic = _TAIL.unpack(os.pread(self._fd, 12, size - 12))
        if magic != MAGIC:
            raise CorruptionError(f"{self.path}: bad magic")
        if footer_len < 25 or footer_len > size:
            raise CorruptionError(f"{self.path}: bad footer length")
        data_bytes = size - footer_len
        if data_bytes % BLOCK:
            raise CorruptionError(f"{self.path}: data region not block-aligned")
        blob = os.pread(self._fd, footer_len, data_bytes)
        stored_crc = _U32.unpack_from(blob, len(blob) - 16)[0]
        if zlib.crc32(blob[:-16]) != stored_crc:
            raise CorruptionError(f"{self.path}: footer checksum mismatch")

        units = data_bytes // BLOCK
        self.counts = blob[:units]
        self.entry_count, unit_count = struct.unpack_from("<II", blob, units)
        if unit_count != units:
            raise CorruptionError(f"{self.path}: unit count mismatch")
        self.unit_count = units
        off = units + 8
        if blob[off]:
            off += 1
            slen = _U32.unpack_from(blob, off)[0]
            off += 4
            self.smallest_key: bytes | None = bytes(blob[off:off + slen])
            off += slen
            llen = _U32.unpack_from(blob, off)[0]
            off += 4
            self.largest_key: bytes | None = bytes(blob[off:off + llen])
        else:
            self.smallest_key = None
            self.largest_key = None
        if sum(self.counts) != self.entry_count:
            raise CorruptionError(f"{self.path}: entry count mismatch")

        # entries before each unit; supports O(log B) ordinal <-> offset
        self._cum = list(accumulate(self.counts, initial=0))[:-1] if units else []
        nxt = [-1] * units
        last = -1
        for i in range(units - 1, -1, -1):
            nxt[i] = last
            if self.counts[i]:
                last = i
        self._next_head = nxt
        self._first_head = next(
            (i for i in range(units) if self.counts[i]), -1)

    # -- cursor arithmetic (metadata only, no data I/O) ---------------------

    def ordinal_of(self, off: CursorOffset) -> int:
        if off == EXHAUSTED:
            return self.entry_count
        blk, key = off
        if blk >= self.unit_count or not self.counts[blk] or key >= self.counts[blk]:
            raise AddressingError(f"invalid cursor {off} for {self.path}")
        return self._cum[blk] + key

    def offset_of_ordinal(self, i: int) -> CursorOffset:
        if i >= self.entry_count:
            return EXHAUSTED
        if i < 0:
            raise AddressingError(f"negative ordinal {i}")
        blk = bisect_right(self._cum, i) - 1
        return CursorOffset(blk, i - self._cum[blk])

    def advance_cursor(self, off: CursorOffset, n: int) -> CursorOffset:
        """Move n keys forward in key order; saturates to EXHAUSTED."""
        if n < 0:
            raise AddressingError("cannot advance by a negative count")
        if off == EXHAUSTED:
            return EXHAUSTED
        return self.offset_of_ordinal(self.ordinal_of(off) + n)

    def stats(self) -> dict:
        return {
            "entry_count": self.entry_count,
            "unit_count": self.unit_count,
            "smallest_key": self.smallest_key,
            "largest_key": self.largest_key,
        }

    # -- data access ---------------------------------------------------------

    def _pread_unit(self, blk: int) -> bytes:
        self.disk_reads += 1
        return os.pread(self._fd, BLOCK, blk * BLOCK)

    def _fetch_unit(self, blk: int) -> bytes:
        return self.caches.raw.get_or_load(
            (self.table_id, blk), lambda: self._pread_unit(blk))

    def decode_block(self, blk: int) -> list[KVEntry]:
        """Decode the block headed at `blk` into its entries (one logical
        block touch; a jumbo block reads all of its units)."""
        self.touches += 1
        cached = self.caches.decoded.get((self.table_id, blk))
        if cached is not None:
            return cached
        if blk >= self.unit_count or not self.counts[blk]:
            raise AddressingError(f"unit {blk} is not a block head")
        n = self.counts[blk]
        raw = self._fetch_unit(blk)
        offs = struct.unpack_from(f"<{n}H", raw, 0)
        if n == 1:
            flags = raw[offs[0]]
            klen, p = _get_uvarint(raw, offs[0] + 1)
            vlen, p = _get_uvarint(raw, p)
            total = (p - offs[0]) + klen + (0 if flags & 1 else vlen)
            if offs[0] + total > BLOCK:  # jumbo
                units = -(-(offs[0] + total) // BLOCK)
                raw = b"".join(self._fetch_unit(blk + u) for u in range(units))
        entries = []
        for o in offs:
            key, value, _ = _parse_entry(raw, o)
            entries.append(KVEntry(key, value))
        self.caches.decoded.put((self.table_id, blk), entries)
        return entries

    def read_entry(self, off: CursorOffset) -> KVEntry:
        if off == EXHAUSTED:
            raise AddressingError("cursor is exhausted")
        blk, key = off
        if blk >= self.unit_count or not self.counts[blk] or key >= self.counts[blk]:
            raise AddressingError(f"invalid cursor {off} for {self.path}")
        return self.decode_block(blk)[key]

    def entries(self) -> Iterator[KVEntry]:
        """All entries in key order (sequential block decode)."""
        blk = self._first_head
        while blk != -1:
            for e in self.decode_block(blk):
                yield e
            blk = self._next_head[blk]

    def all_keys(self) -> list[bytes]:
        """All keys in order; memoized (the file is immutable)."""
        if self._keys is None:
            self._keys = [e.key for e in self.entries()]
        return self._keys

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __repr__(self):
        return f"<TableFile {os.path.basename(self.path)} n={self.entry_count}>"
