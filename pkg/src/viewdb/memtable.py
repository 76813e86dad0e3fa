"""In-memory write buffer with per-key 8-bit update counters.

Counters saturate at 255 and feed compaction's hot-key exclusion; keys a
compaction excludes come back via reinsert_excluded with halved counters.
"""
from __future__ import annotations

from typing import Iterator, Optional

from sortedcontainers import SortedDict

from .errors import MemTableSealedError

_ENTRY_OVERHEAD = 24  # rough per-entry bookkeeping for the size threshold


class MemTable:
    def __init__(self):
        self._map: SortedDict = SortedDict()
        self.approx_bytes = 0
        self.sealed = False

    def __len__(self) -> int:
        return len(self._map)

    def __contains__(self, key: bytes) -> bool:
        return key in self._map

    # -- writes ---------------------------------------------------------------

    def _check_writable(self):
        if self.sealed:
            raise MemTableSealedError("MemTable is sealed")

    def next_count(self, key: bytes) -> int:
        cell = self._map.get(key)
        return min((cell[1] if cell else 0) + 1, 255)

    def put(self, key: bytes, value: Optional[bytes]) -> int:
        """Insert or replace; tombstones (value None) count as updates.
        Returns the entry's new update count."""
        count = self.next_count(key)
        self.put_with_count(key, value, count)
        return count

    def put_with_count(self, key: bytes, value: Optional[bytes], count: int):
        self._check_writable()
        cell = self._map.get(key)
        vlen = len(value) if value is not None else 0
        if cell is None:
            self._map[key] = [value, count]
            self.approx_bytes += len(key) + vlen + _ENTRY_OVERHEAD
        else:
            old = len(cell[0]) if cell[0] is not None else 0
            self.approx_bytes += vlen - old
            cell[0] = value
            cell[1] = count

    def reinsert_excluded(self, key: bytes, value: Optional[bytes],
                          old_count: int) -> None:
        """Return a hot key skipped by compaction: insert with a halved
        counter, or fold the halved counter into a newer entry's count
        without replacing its value."""
        self._check_writable()
        half = old_count // 2
        cell = self._map.get(key)
        if cell is None:
            self.put_with_count(key, value, half)
        else:
            cell[1] = min(cell[1] + half, 255)

    def restore(self, key: bytes, value: Optional[bytes], count: int) -> None:
        """Return an aborted partition's staged entry; a newer update in
        this table wins."""
        self._check_writable()
        if key not in self._map:
            self.put_with_count(key, value, count)

    def seal(self) -> None:
        self.sealed = True

    # -- reads ----------------------------------------------------------------

    def get(self, key: bytes):
        """(value_or_None, count) if present; None if the key is unknown."""
        cell = self._map.get(key)
        return (cell[0], cell[1]) if cell is not None else None

    def items(self) -> Iterator[tuple[bytes, Optional[bytes], int]]:
        for key, cell in self._map.items():
            yield key, cell[0], cell[1]

    def items_from(self, key: bytes) -> Iterator[tuple[bytes, Optional[bytes], int]]:
        for k in self._map.irange(minimum=key):
            cell = self._map[k]
            yield k, cell[0], cell[1]

    def keys(self):
        return self._map.keys()
