"""Crash-safe write-ahead log organized as timestamped virtual logs.

The log file is a pool of 4 KB blocks. The live generation is described by
a mapping table (itself stored in dedicated mapping blocks) that lists, in
logical order:

  * VALID blocks — carried over by garbage collection without rewriting,
    with a 256-bit bitmap masking dead records, and
  * UNWRITTEN blocks — free slots for future appends, each recording the
    inverse of the block's current flip bit.

Every block's first byte holds a flip bit that inverts on each overwrite.
At recovery a slot whose flip bit equals the mapping's recorded value was
written after the mapping; otherwise it is still unwritten and scanning
stops there. Mappings carry unique, monotonically increasing timestamps;
the newest one that passes its checksum wins.

Block formats (little-endian):

    data block     [1B flags: bit0 flip][used u16][records...]
    record         [1B type: 1=PUT 2=DEL][1B update_count]
                   [uvarint klen][uvarint vlen][key][value]
    mapping chunk  [1B flags: bit1 set][ts u64][chunk u16][chunks u16]
                   [used u16][payload]
    mapping        [total_blocks u32][entry count u32][entries...][crc32]
    entry          [phys u32][1B: bit0 expected_flip, bit1 valid]
                   [32B record bitmap, valid entries only]

Records never span blocks (payload capacity 4093 bytes, at most 256
records per block). Within one block, record bytes are written before the
header that publishes them, so a crash between the two loses only
unacknowledged records.
"""
from __future__ import annotations

import os
import struct
import zlib
from typing import Callable, NamedTuple, Optional

from .cache import BLOCK
from .errors import CapacityError, CorruptionError, LogFullError
from .fio import FileOps
from .memtable import MemTable
from .table import _get_uvarint, _put_uvarint

FLIP_BIT = 0x01
MAPPING_BIT = 0x02
PAYLOAD_CAP = BLOCK - 3
MAX_RECORDS_PER_BLOCK = 256

_CHUNK_HDR = struct.Struct("<BQHHH")
_CHUNK_CAP = BLOCK - _CHUNK_HDR.size


class WalRecord(NamedTuple):
    key: bytes
    value: Optional[bytes]  # None = deletion
    count: int


class MapEntry(NamedTuple):
    phys: int
    expected_flip: int
    valid: bool
    bitmap: bytes  # 32 bytes when valid, b"" otherwise


class Mapping(NamedTuple):
    timestamp: int
    total_blocks: int  # file block count when the mapping was written
    entries: list


def encode_record(rec: WalRecord) -> bytes:
    buf = bytearray()
    buf.append(1 if rec.value is not None else 2)
    buf.append(rec.count)
    _put_uvarint(buf, len(rec.key))
    _put_uvarint(buf, 0 if rec.value is None else len(rec.value))
    buf += rec.key
    if rec.value is not None:
        buf += rec.value
    return bytes(buf)


def _parse_records(block: bytes, path: str, phys: int) -> list[tuple[WalRecord, int]]:
    """(record, encoded_size) pairs from one data block."""
    used = struct.unpack_from("<H", block, 1)[0]
    if used > PAYLOAD_CAP:
        raise CorruptionError(f"{path}: block {phys} used={used} out of range")
    out = []
    off = 3
    end = 3 + used
    while off < end:
        start = off
        rtype = block[off]
        count = block[off + 1]
        klen, off = _get_uvarint(block, off + 2)
        vlen, off = _get_uvarint(block, off)
        if off + klen + vlen > end or rtype not in (1, 2):
            raise CorruptionError(f"{path}: malformed record in block {phys}")
        key = bytes(block[off:off + klen])
        off += klen
        value = None if rtype == 2 else bytes(block[off:off + vlen])
        off += vlen
        out.append((WalRecord(key, value, count), off - start))
    return out


def _encode_mapping(mapping: Mapping) -> bytes:
    buf = bytearray(struct.pack("<II", mapping.total_blocks, len(mapping.entries)))
    for e in mapping.entries:
        flags = (e.expected_flip & 1) | (2 if e.valid else 0)
        buf += struct.pack("<IB", e.phys, flags)
        if e.valid:
            buf += e.bitmap
    buf += struct.pack("<I", zlib.crc32(buf))
    return bytes(buf)


def _decode_mapping(payload: bytes, timestamp: int, path: str) -> Mapping:
    if len(payload) < 12:
        raise CorruptionError(f"{path}: mapping too short")
    stored = struct.unpack_from("<I", payload, len(payload) - 4)[0]
    if zlib.crc32(payload[:-4]) != stored:
        raise CorruptionError(f"{path}: mapping checksum mismatch")
    total_blocks, n = struct.unpack_from("<II", payload, 0)
    off = 8
    entries = []
    for _ in range(n):
        phys, flags = struct.unpack_from("<IB", payload, off)
        off += 5
        valid = bool(flags & 2)
        bitmap = b""
        if valid:
            bitmap = payload[off:off + 32]
            off += 32
        entries.append(MapEntry(phys, flags & 1, valid, bitmap))
    if off != len(payload) - 4:
        raise CorruptionError(f"{path}: mapping length mismatch")
    return Mapping(timestamp, total_blocks, entries)


def _load_best_mapping(blocks: list[bytes], path: str) -> Optional[Mapping]:
    by_ts: dict[int, dict[int, bytes]] = {}
    counts: dict[int, int] = {}
    for b in blocks:
        if not b or not b[0] & MAPPING_BIT:
            continue
        _, ts, idx, total, used = _CHUNK_HDR.unpack_from(b, 0)
        if used > _CHUNK_CAP or total == 0:
            continue
        by_ts.setdefault(ts, {})[idx] = b[_CHUNK_HDR.size:_CHUNK_HDR.size + used]
        counts[ts] = total
    for ts in sorted(by_ts, reverse=True):
        parts = by_ts[ts]
        if set(parts) != set(range(counts[ts])):
            continue
        payload = b"".join(parts[i] for i in range(counts[ts]))
        try:
            return _decode_mapping(payload, ts, path)
        except CorruptionError:
            continue  # torn rewrite of a mapping; older one may be intact
    return None


def _read_blocks(path: str) -> list[bytes]:
    """File content as 4 KB blocks. The final block may be short on disk
    (blocks are not padded when written); zero-padding it is safe because
    content is only reachable through a published header."""
    with open(path, "rb") as f:
        data = f.read()
    n = -(-len(data) // BLOCK)
    blocks = [data[i * BLOCK:(i + 1) * BLOCK] for i in range(n)]
    if blocks and len(blocks[-1]) < BLOCK:
        blocks[-1] = blocks[-1] + b"\x00" * (BLOCK - len(blocks[-1]))
    return blocks


def replay(path: str) -> list[tuple[int, int, WalRecord, int]]:
    """Logical record stream of the newest virtual log:
    (phys_block, record_index, record, encoded_size) in replay order."""
    blocks = _read_blocks(path)
    mapping = _load_best_mapping(blocks, path)
    out: list[tuple[int, int, WalRecord, int]] = []
    if mapping is None:
        return out

    for e in mapping.entries:
        if not e.valid:
            continue
        if e.phys >= len(blocks):
            raise CorruptionError(f"{path}: valid block {e.phys} missing")
        b = blocks[e.phys]
        if b[0] & MAPPING_BIT or (b[0] & FLIP_BIT) != e.expected_flip:
            raise CorruptionError(f"{path}: valid block {e.phys} overwritten")
        recs = _parse_records(b, path, e.phys)
        for i, (rec, size) in enumerate(recs):
            if e.bitmap[i // 8] & (1 << (i % 8)):
                out.append((e.phys, i, rec, size))

    for e in mapping.entries:
        if e.valid:
            continue
        if e.phys >= len(blocks):
            break
        b = blocks[e.phys]
        if b[0] & MAPPING_BIT or (b[0] & FLIP_BIT) != e.expected_flip:
            break  # slots are consumed in order: first unwritten ends the log
        for i, (rec, size) in enumerate(_parse_records(b, path, e.phys)):
            out.append((e.phys, i, rec, size))

    for phys in range(mapping.total_blocks, len(blocks)):
        b = blocks[phys]
        if b[0] & MAPPING_BIT:
            continue
        used = struct.unpack_from("<H", b, 1)[0]
        if used == 0:
            break
        try:
            recs = _parse_records(b, path, phys)
        except CorruptionError:
            break  # torn tail
        for i, (rec, size) in enumerate(recs):
            out.append((phys, i, rec, size))
    return out


def recover(path: str, fio: FileOps | None = None,
            max_bytes: int = 64 << 20) -> tuple["Wal", MemTable]:
    """Open (or create) the log and rebuild the MemTable it describes."""
    fio = fio or FileOps()
    mem = MemTable()
    if not os.path.exists(path) or os.path.getsize(path) < BLOCK:
        wal = Wal._create(path, fio, max_bytes)
        return wal, mem

    blocks = _read_blocks(path)
    mapping = _load_best_mapping(blocks, path)
    if mapping is None:
        wal = Wal._create(path, fio, max_bytes)
        return wal, mem

    for _, _, rec, _ in replay(path):
        mem.put_with_count(rec.key, rec.value, rec.count)

    wal = Wal(path, fio, max_bytes)
    wal._adopt(mapping, blocks)
    return wal, mem


class Wal:
    """Single-writer append/GC handle over one log file."""

    def __init__(self, path: str, fio: FileOps, max_bytes: int):
        self.path = path
        self.fio = fio
        self.max_bytes = max_bytes
        self.fd = fio.open_rw(path)
        self.mapping: Mapping | None = None
        self._slots: list[tuple[int, int]] = []  # (phys, flip_to_write)
        self._slot_i = 0
        self._file_blocks = 0
        self._cur_phys = -1
        self._cur_flip = 0
        self._cur_used = 0
        self._cur_records = 0

    # -- setup -----------------------------------------------------------------

    @classmethod
    def _create(cls, path: str, fio: FileOps, max_bytes: int) -> "Wal":
        wal = cls(path, fio, max_bytes)
        os.ftruncate(wal.fd, 0)
        wal.mapping = Mapping(1, 0, [])
        wal._write_mapping_chunks(wal.mapping)
        return wal

    def _adopt(self, mapping: Mapping, blocks: list[bytes]) -> None:
        self.mapping = mapping
        self._file_blocks = len(blocks)
        self._slots = []
        consumed = 0
        counting = True
        for e in mapping.entries:
            if e.valid:
                continue
            if counting and e.phys < len(blocks):
                b = blocks[e.phys]
                if not b[0] & MAPPING_BIT and (b[0] & FLIP_BIT) == e.expected_flip:
                    consumed += 1
                    continue
            counting = False
            self._slots.append((e.phys, e.expected_flip))
        self._slot_i = 0

    def _write_mapping_chunks(self, mapping: Mapping) -> None:
        payload = _encode_mapping(mapping)
        chunks = [payload[i:i + _CHUNK_CAP]
                  for i in range(0, len(payload), _CHUNK_CAP)] or [b""]
        for idx, chunk in enumerate(chunks):
            hdr = _CHUNK_HDR.pack(MAPPING_BIT, mapping.timestamp, idx,
                                  len(chunks), len(chunk))
            block = hdr + chunk + b"\x00" * (_CHUNK_CAP - len(chunk))
            self.fio.pwrite(self.fd, self._file_blocks * BLOCK, block)
            self._file_blocks += 1
        self.fio.fsync(self.fd)

    # -- appends -----------------------------------------------------------------

    def _next_block(self) -> None:
        if self._slot_i < len(self._slots):
            phys, flip = self._slots[self._slot_i]
            self._slot_i += 1
        else:
            if (self._file_blocks + 1) * BLOCK > self.max_bytes:
                raise LogFullError(
                    f"log would exceed {self.max_bytes} bytes")
            phys = self._file_blocks
            self._file_blocks += 1
            flip = 1
        self._cur_phys = phys
        self._cur_flip = flip
        self._cur_used = 0
        self._cur_records = 0

    def append(self, records: list[WalRecord]) -> None:
        """Write records durably; acknowledged (returns) only after every
        block involved has its publishing header on disk. Record bytes land
        before the header that makes them visible."""
        if not records:
            return
        segs: list[list] = []  # [phys, flip, write_off, payload, used_after]
        for rec in records:
            data = encode_record(rec)
            if len(data) > PAYLOAD_CAP:
                raise CapacityError(
                    f"record of {len(data)} bytes exceeds one log block")
            if (self._cur_phys < 0
                    or self._cur_used + len(data) > PAYLOAD_CAP
                    or self._cur_records >= MAX_RECORDS_PER_BLOCK):
                self._next_block()
                segs.append([self._cur_phys, self._cur_flip, 3, bytearray(), 0])
            elif not segs or segs[-1][0] != self._cur_phys:
                segs.append([self._cur_phys, self._cur_flip,
                             3 + self._cur_used, bytearray(), 0])
            seg = segs[-1]
            seg[3] += data
            self._cur_used += len(data)
            self._cur_records += 1
            seg[4] = self._cur_used
        for phys, _, off, payload, _ in segs:
            self.fio.pwrite(self.fd, phys * BLOCK + off, bytes(payload))
        for phys, flip, _, _, used in segs:
            self.fio.pwrite(self.fd, phys * BLOCK,
                            struct.pack("<BH", flip, used))
        self.fio.fsync(self.fd)

    # -- garbage collection ---------------------------------------------------------

    def collect_garbage(self, is_live: Callable[[bytes], bool]) -> dict:
        """Build the next virtual log: blocks keeping >= 1/4 of their used
        bytes live are remapped with a bitmap; other live records are
        rewritten densely; only the newest instance of a live key survives."""
        assert self.mapping is not None
        stream = replay(self.path)
        blocks = _read_blocks(self.path)

        newest: dict[bytes, tuple[int, int]] = {}
        for phys, idx, rec, _ in stream:
            newest[rec.key] = (phys, idx)
        live_marks: dict[int, dict[int, int]] = {}  # phys -> {rec_idx: size}
        for phys, idx, rec, size in stream:
            if is_live(rec.key) and newest[rec.key] == (phys, idx):
                live_marks.setdefault(phys, {})[idx] = size
        block_order = []
        seen = set()
        for phys, _, _, _ in stream:
            if phys not in seen:
                seen.add(phys)
                block_order.append(phys)

        entries: list[MapEntry] = []
        rewrite: list[bytes] = []
        stats = {"remapped_blocks": 0, "rewritten_records": 0,
                 "rewritten_bytes": 0, "dropped_blocks": 0}
        for phys in block_order:
            marks = live_marks.get(phys)
            b = blocks[phys]
            if not marks:
                stats["dropped_blocks"] += 1
                continue
            used = struct.unpack_from("<H", b, 1)[0]
            live_bytes = sum(marks.values())
            if live_bytes * 4 >= used:
                bitmap = bytearray(32)
                for i in marks:
                    bitmap[i // 8] |= 1 << (i % 8)
                entries.append(MapEntry(phys, b[0] & FLIP_BIT, True,
                                        bytes(bitmap)))
                stats["remapped_blocks"] += 1
            else:
                recs = _parse_records(b, self.path, phys)
                off = 3
                for i, (_, size) in enumerate(recs):
                    if i in marks:
                        start = 3 + sum(s for _, s in recs[:i])
                        rewrite.append(b[start:start + size])
                stats["rewritten_records"] += len(marks)
                stats["rewritten_bytes"] += live_bytes
                stats["dropped_blocks"] += 1

        # densely rewrite the remaining live records into fresh blocks
        out_used = 0
        out_recs: list[bytes] = []

        def flush_rewrite():
            nonlocal out_used
            if not out_recs:
                return
            payload = b"".join(out_recs)
            block = (struct.pack("<BH", 1, len(payload)) + payload
                     + b"\x00" * (PAYLOAD_CAP - len(payload)))
            phys = self._file_blocks
            self.fio.pwrite(self.fd, phys * BLOCK, block)
            self._file_blocks += 1
            bitmap = bytearray(32)
            for i in range(len(out_recs)):
                bitmap[i // 8] |= 1 << (i % 8)
            entries.append(MapEntry(phys, 1, True, bytes(bitmap)))
            out_recs.clear()
            out_used = 0

        for data in rewrite:
            if out_used + len(data) > PAYLOAD_CAP or len(out_recs) >= MAX_RECORDS_PER_BLOCK:
                flush_rewrite()
            out_recs.append(data)
            out_used += len(data)
        flush_rewrite()

        total_blocks = self._file_blocks
        valid_set = {e.phys for e in entries}
        flips = [b[0] & FLIP_BIT if b else 0 for b in blocks]
        while len(flips) < total_blocks:
            flips.append(1)  # rewrite blocks just written
        for phys in range(total_blocks):
            if phys not in valid_set:
                entries.append(MapEntry(phys, flips[phys] ^ 1, False, b""))

        new_mapping = Mapping(self.mapping.timestamp + 1, total_blocks, entries)
        self._write_mapping_chunks(new_mapping)

        self.mapping = new_mapping
        self._slots = [(e.phys, e.expected_flip)
                       for e in entries if not e.valid]
        self._slot_i = 0
        self._cur_phys = -1
        self._cur_used = 0
        self._cur_records = 0
        return stats

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1
