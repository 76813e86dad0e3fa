"""Per-store caches over table data.

BlockCache is an LRU over raw 4 KB units; it is the unit the capacity knob
counts and the place disk reads happen. DecodedCache memoizes per-block
entry decodings so hot read paths skip re-parsing. Neither cache ever
changes results, only I/O counts.
"""
from __future__ import annotations

import threading
from collections import OrderedDict

BLOCK = 4096


class BlockCache:
    """Thread-safe LRU of raw 4 KB units keyed by (file_id, unit_index).

    get_or_load is linearizable per key: the lock is held across the miss
    load, so concurrent readers observe one load per block.
    """

    def __init__(self, capacity_bytes: int = 64 << 20):
        self.capacity_units = max(1, capacity_bytes // BLOCK)
        self._map: OrderedDict[tuple, bytes] = OrderedDict()
        self._lock = threading.Lock()

    def get_or_load(self, key: tuple, loader) -> bytes:
        with self._lock:
            data = self._map.get(key)
            if data is not None:
                self._map.move_to_end(key)
                return data
            data = loader()
            self._map[key] = data
            while len(self._map) > self.capacity_units:
                self._map.popitem(last=False)
            return data


class DecodedCache:
    """LRU of decoded blocks (lists of entries), counted in blocks."""

    def __init__(self, capacity_blocks: int = 16384):
        self.capacity = max(1, capacity_blocks)
        self._map: OrderedDict[tuple, list] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: tuple):
        with self._lock:
            got = self._map.get(key)
            if got is not None:
                self._map.move_to_end(key)
            return got

    def put(self, key: tuple, value: list) -> None:
        with self._lock:
            self._map[key] = value
            while len(self._map) > self.capacity:
                self._map.popitem(last=False)


class CacheSet:
    """The pair of caches a store shares across its table files."""

    def __init__(self, block_cache_bytes: int = 64 << 20,
                 decoded_cache_blocks: int = 16384):
        self.raw = BlockCache(block_cache_bytes)
        self.decoded = DecodedCache(decoded_cache_blocks)
