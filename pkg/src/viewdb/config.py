"""Store configuration and its external knob names."""
from __future__ import annotations

from dataclasses import dataclass, fields

# Aliases accepted in config files / CLI flags, mapped to field names.
_ALIASES = {
    "D": "group_capacity",
    "T": "max_tables",
    "M": "split_fanout",
}


@dataclass
class StoreConfig:
    max_file_size: int = 16 << 20          # table file budget; 64 MB available
    group_capacity: int = 32               # "D": selectors per view group
    block_cache_bytes: int = 64 << 20
    memtable_bytes: int = 8 << 20          # flush threshold
    max_log_bytes: int = 64 << 20          # hard cap on the WAL file
    max_tables: int = 10                   # "T": table-count threshold per partition
    split_fanout: int = 2                  # "M": tables per partition during a split
    wa_abort_threshold: float = 5.0
    abort_budget_fraction: float = 0.15
    hot_key_threshold: int = 4
    compaction_workers: int = 4
    in_group_binary_search: bool = True    # off = linear scan from the anchor
    split_ratio_floor: float = 1.5         # split when best merge ratio <= this
    sync_writes: bool = False              # fsync on WAL/manifest commits
    auto_flush: bool = True                # freeze+flush when memtable_bytes reached
    decoded_cache_blocks: int = 16384      # decoded-entry memo atop the raw cache

    def __post_init__(self):
        if self.group_capacity < 1 or self.group_capacity & (self.group_capacity - 1):
            raise ValueError("group_capacity must be a power of two")
        if self.max_tables <= 1:
            raise ValueError("max_tables must be > 1")
        if self.split_fanout < 1:
            raise ValueError("split_fanout must be positive")
        if not 0 < self.abort_budget_fraction <= 1:
            raise ValueError("abort_budget_fraction must be in (0, 1]")
        if self.max_file_size > (0xFFFF + 1) * 4096:
            raise ValueError("max_file_size cannot exceed 256 MB (16-bit block ids)")

    @classmethod
    def from_dict(cls, raw: dict) -> "StoreConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = _ALIASES.get(key, key)
            if name not in known:
                raise ValueError(f"unknown config key: {key}")
            if name == "in_group_binary_search" and isinstance(value, str):
                value = {"on": True, "off": False}[value.lower()]
            kwargs[name] = value
        return cls(**kwargs)
