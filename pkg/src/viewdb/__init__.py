"""Embedded KV store over range-partitioned sorted runs, each partition
indexed by a persisted sorted view, compacted with a write-efficient
tiered strategy."""

from .config import StoreConfig
from .errors import (AddressingError, BindingError, CapacityError,
                     CorruptionError, LogFullError, MemTableSealedError,
                     OrderingError, StoreBusy, StoreError)
from .store import Store, StoreIterator, open
from .table import EXHAUSTED, CursorOffset, KVEntry, TableFile, build_table
from .view import SortedView, ViewIterator, build_view, open_view

__all__ = [
    "AddressingError", "BindingError", "CapacityError", "CorruptionError",
    "CursorOffset", "EXHAUSTED", "KVEntry", "LogFullError",
    "MemTableSealedError", "OrderingError", "SortedView", "Store",
    "StoreBusy", "StoreConfig", "StoreError", "StoreIterator", "TableFile",
    "ViewIterator", "build_table", "build_view", "open", "open_view",
]
