"""Append-only manifest of version edits.

Each record is CRC-framed; a version becomes visible only at its COMMIT
record, written in the same buffered append as its edits so the commit is
a single write. Replay stops at the first torn frame (a crash artifact),
which discards any uncommitted trailing edits.

    file   = [magic 8B] record*
    record = [u32 frame_len][u8 kind][payload][u32 crc over kind+payload]
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

from .errors import CorruptionError
from .fio import FileOps

MAGIC = b"KVMANIF1"

PART_ADD = 1     # pid u64, lower: u32 + bytes
PART_DEL = 2     # pid u64
TABLE_ADD = 3    # pid u64, table_id u64
TABLE_DEL = 4    # pid u64, table_id u64
VIEW_SET = 5     # pid u64, view_id u64 (NO_VIEW = none)
WAL_GEN = 6      # generation u64
COMMIT = 7       # version seq u64

NO_VIEW = 0xFFFFFFFFFFFFFFFF


@dataclass
class PartitionMeta:
    lower: bytes
    table_ids: list = field(default_factory=list)
    view_id: int | None = None


@dataclass
class ManifestState:
    partitions: dict = field(default_factory=dict)  # pid -> PartitionMeta
    wal_gen: int = 1
    version_seq: int = 0
    max_id: int = 0
    good_bytes: int = len(MAGIC)


def encode_edit(kind: int, *args) -> bytes:
    if kind in (PART_ADD,):
        pid, lower = args
        payload = struct.pack("<QI", pid, len(lower)) + lower
    elif kind in (PART_DEL, WAL_GEN, COMMIT):
        payload = struct.pack("<Q", args[0])
    elif kind in (TABLE_ADD, TABLE_DEL, VIEW_SET):
        payload = struct.pack("<QQ", *args)
    else:
        raise ValueError(f"unknown edit kind {kind}")
    body = bytes([kind]) + payload
    return struct.pack("<I", len(body)) + body + struct.pack("<I", zlib.crc32(body))


def replay(path: str) -> ManifestState:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CorruptionError(f"{path}: bad manifest magic")
    state = ManifestState()
    staged: list[tuple] = []
    off = 8
    while off + 8 <= len(data):
        frame_len = struct.unpack_from("<I", data, off)[0]
        end = off + 4 + frame_len + 4
        if frame_len < 1 or end > len(data):
            break  # torn tail
        body = data[off + 4:off + 4 + frame_len]
        crc = struct.unpack_from("<I", data, end - 4)[0]
        if zlib.crc32(body) != crc:
            break  # torn tail
        kind = body[0]
        payload = body[1:]
        if kind == COMMIT:
            seq = struct.unpack("<Q", payload)[0]
            _apply(state, staged)
            staged.clear()
            state.version_seq = seq
            state.good_bytes = end
        else:
            staged.append((kind, payload))
            if kind != WAL_GEN:
                pid = struct.unpack_from("<Q", payload, 0)[0]
                state.max_id = max(state.max_id, pid)
            if kind in (TABLE_ADD, TABLE_DEL, VIEW_SET):
                other = struct.unpack_from("<Q", payload, 8)[0]
                if other != NO_VIEW:
                    state.max_id = max(state.max_id, other)
        off = end
    return state


def _apply(state: ManifestState, staged: list[tuple]) -> None:
    for kind, payload in staged:
        if kind == PART_ADD:
            pid, llen = struct.unpack_from("<QI", payload, 0)
            lower = payload[12:12 + llen]
            state.partitions[pid] = PartitionMeta(lower)
        elif kind == PART_DEL:
            pid = struct.unpack("<Q", payload)[0]
            state.partitions.pop(pid, None)
        elif kind == TABLE_ADD:
            pid, tid = struct.unpack("<QQ", payload)
            state.partitions[pid].table_ids.append(tid)
        elif kind == TABLE_DEL:
            pid, tid = struct.unpack("<QQ", payload)
            state.partitions[pid].table_ids.remove(tid)
        elif kind == VIEW_SET:
            pid, vid = struct.unpack("<QQ", payload)
            state.partitions[pid].view_id = None if vid == NO_VIEW else vid
        elif kind == WAL_GEN:
            state.wal_gen = struct.unpack("<Q", payload)[0]


class Manifest:
    """Writer over the manifest file; commit() is the atomicity point."""

    def __init__(self, path: str, fio: FileOps):
        self.path = path
        self.fio = fio
        created = not os.path.exists(path)
        self.fd = fio.open_rw(path)
        if created:
            fio.pwrite(self.fd, 0, MAGIC)
            self._end = len(MAGIC)
        else:
            self._end = replay(path).good_bytes
            os.ftruncate(self.fd, self._end)  # drop any torn tail

    def commit(self, edits: list[bytes], seq: int) -> None:
        buf = b"".join(edits) + encode_edit(COMMIT, seq)
        self.fio.pwrite(self.fd, self._end, buf)
        self.fio.fsync(self.fd)
        self._end += len(buf)

    def close(self) -> None:
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1
