"""Per-partition compaction planning and execution.

Decision flow per partition receiving staged data:
  * MINOR when existing tables + expected new tables stay within the
    table-count threshold: staged data is written to new tables, nothing
    existing is rewritten, the partition's view is rebuilt.
  * otherwise MAJOR over the suffix of newest tables whose merge gives
    the best input/output file ratio; SPLIT when even the best ratio is
    too low to reduce the table count meaningfully.
  * the global scheduler then aborts the highest-WA partitions, up to a
    budget fraction of all staged bytes, leaving their data in the
    MemTable and the WAL.

Only age-contiguous suffixes (the newest tables) are merge candidates:
merging a non-contiguous subset could resurface a stale version from a
kept mid-age table. In the tiered flow the newest tables are the small
ones, so this coincides with merging the small files first.

Hot keys (update count above the threshold) are excluded from table
output and handed back for MemTable reinsertion with halved counters.
"""
from __future__ import annotations

import heapq
import os
from dataclasses import dataclass, field
from itertools import groupby
from operator import itemgetter
from typing import Iterable, Optional

from .cache import CacheSet
from .config import StoreConfig
from .fio import FileOps
from .table import TableFile, build_table, table_file_name
from .view import SortedView, build_view, predict_file_bytes, view_file_name

ABORT = "ABORT"
MINOR = "MINOR"
MAJOR = "MAJOR"
SPLIT = "SPLIT"

# staged entry: (key, value_or_None, update_count)
StagedEntry = tuple[bytes, Optional[bytes], int]


@dataclass
class CompactionPlan:
    pid: int
    decision: str
    input_count: int = 0              # MAJOR only
    staged_bytes: int = 0
    estimated_wa: float = 0.0
    excluded_keys: list = field(default_factory=list)


@dataclass
class NewPartition:
    pid: int
    lower: bytes
    tables: list          # TableFile, oldest -> newest
    view: SortedView | None
    view_id: int | None


class CompactionContext:
    """Services an executor needs from the store."""

    def __init__(self, directory: str, config: StoreConfig, fio: FileOps,
                 caches: CacheSet, allocate_id):
        self.directory = directory
        self.config = config
        self.fio = fio
        self.caches = caches
        self.allocate_id = allocate_id


def staged_size(staged: Iterable[StagedEntry]) -> int:
    return sum(len(k) + (len(v) if v is not None else 0) for k, v, _ in staged)


def choose_decision(table_sizes: list[int], staged_bytes: int,
                    config: StoreConfig) -> tuple[str, int, float]:
    """(decision, major_input_count, best_ratio) for one partition.
    table_sizes are file sizes oldest -> newest."""
    new_tables = max(1, -(-staged_bytes // config.max_file_size))
    if len(table_sizes) + new_tables <= config.max_tables:
        return MINOR, 0, 0.0
    best_k, best_ratio = 0, 0.0
    for k in range(2, len(table_sizes) + 1):
        merged = staged_bytes + sum(table_sizes[-k:])
        outputs = max(1, -(-merged // config.max_file_size))
        ratio = k / outputs
        if ratio > best_ratio:
            best_k, best_ratio = k, ratio
    if best_k == 0 or best_ratio <= config.split_ratio_floor:
        return SPLIT, 0, best_ratio
    return MAJOR, best_k, best_ratio


def estimate_wa(table_sizes: list[int], table_entries: list[int],
                staged_bytes: int, staged_entries: int, avg_key_len: float,
                config: StoreConfig) -> tuple[float, str, int]:
    """Predicted (bytes written / staged bytes) under the cheapest viable
    decision, including the view rebuild."""
    decision, k, _ = choose_decision(table_sizes, staged_bytes, config)
    if decision == MINOR:
        rewritten = 0
        runs_after = len(table_sizes) + max(1, -(-staged_bytes // config.max_file_size))
    elif decision == MAJOR:
        rewritten = sum(table_sizes[-k:])
        merged = staged_bytes + rewritten
        outs = max(1, -(-merged // config.max_file_size))
        runs_after = len(table_sizes) - k + outs
    else:
        rewritten = sum(table_sizes)
        runs_after = config.split_fanout
    total_entries = sum(table_entries) + staged_entries
    view_bytes = predict_file_bytes(total_entries, avg_key_len,
                                    max(1, min(runs_after, 127)),
                                    config.group_capacity)
    wa = (staged_bytes + rewritten + view_bytes) / max(staged_bytes, 1)
    return wa, decision, k


def global_schedule(candidates: list[CompactionPlan],
                    config: StoreConfig) -> list[CompactionPlan]:
    """Mark ABORT on the highest-WA partitions while their WA exceeds the
    threshold and the aborted staged bytes stay within the budget."""
    total = sum(p.staged_bytes for p in candidates)
    budget = config.abort_budget_fraction * total
    aborted = 0
    for plan in sorted(candidates, key=lambda p: p.estimated_wa, reverse=True):
        if plan.estimated_wa <= config.wa_abort_threshold:
            break
        if aborted + plan.staged_bytes > budget:
            continue
        plan.decision = ABORT
        aborted += plan.staged_bytes
    return candidates


def split_hot_keys(staged: list[StagedEntry],
                   config: StoreConfig) -> tuple[list, list]:
    kept, excluded = [], []
    threshold = config.hot_key_threshold
    for entry in staged:
        (excluded if entry[2] > threshold else kept).append(entry)
    return kept, excluded


def _merged_entries(staged: list[StagedEntry], tables: list[TableFile],
                    drop_tombstones: bool):
    """Sort-merge staged data (newest) with tables, keeping only the newest
    version of each key; tombstones dropped only when the merge covers
    every run of the partition."""
    streams = [((k, 0, v) for k, v, _ in staged)]
    n = len(tables)
    for age, t in enumerate(tables):  # oldest first -> highest rank
        rank = n - age
        streams.append(((e.key, rank, e.value) for e in t.entries()))
    merged = heapq.merge(*streams, key=itemgetter(0, 1))
    for key, group in groupby(merged, key=itemgetter(0)):
        _, _, value = next(group)
        if drop_tombstones and value is None:
            continue
        yield key, value


def _write_tables(entries, ctx: CompactionContext) -> list[TableFile]:
    out = []
    rest = iter(entries)
    while True:
        probe = next(rest, None)
        if probe is None:
            break
        tid = ctx.allocate_id()
        path = os.path.join(ctx.directory, table_file_name(tid))
        table, rest2 = build_table(_chain_one(probe, rest), path, ctx.fio,
                                   ctx.config.max_file_size, ctx.caches)
        out.append(table)
        rest = rest2 if rest2 is not None else iter(())
    return out


def _chain_one(first, rest):
    yield first
    yield from rest


def _build_partition(ctx: CompactionContext, lower: bytes,
                     tables: list[TableFile]) -> NewPartition:
    pid = ctx.allocate_id()
    if not tables:
        return NewPartition(pid, lower, [], None, None)
    view = build_view(tables, ctx.config.group_capacity,
                      ctx.config.in_group_binary_search)
    view_id = ctx.allocate_id()
    view.persist(os.path.join(ctx.directory, view_file_name(view_id)), ctx.fio)
    return NewPartition(pid, lower, tables, view, view_id)


def execute_compaction(plan: CompactionPlan, staged: list[StagedEntry],
                       lower: bytes, tables: list[TableFile],
                       ctx: CompactionContext) -> list[NewPartition] | None:
    """Run a non-ABORT plan. Returns the replacement partition(s), or None
    when nothing changed. plan.excluded_keys receives the hot entries that
    must be reinserted once the new version is durable."""
    assert plan.decision in (MINOR, MAJOR, SPLIT)
    kept, plan.excluded_keys = split_hot_keys(staged, ctx.config)

    if plan.decision == MINOR:
        new_tables = _write_tables(
            ((k, v) for k, v, _ in kept), ctx)
        if not new_tables:
            return None
        return [_build_partition(ctx, lower, tables + new_tables)]

    if plan.decision == MAJOR:
        k = plan.input_count
        inputs = tables[-k:]
        keep = tables[:-k]
        covers_all = not keep
        outputs = _write_tables(
            _merged_entries(kept, inputs, drop_tombstones=covers_all), ctx)
        return [_build_partition(ctx, lower, keep + outputs)]

    # SPLIT: merge everything, deal M tables per new partition
    outputs = _write_tables(
        _merged_entries(kept, tables, drop_tombstones=True), ctx)
    if not outputs:
        return [_build_partition(ctx, lower, [])]
    fanout = ctx.config.split_fanout
    parts = []
    for i in range(0, len(outputs), fanout):
        chunk = outputs[i:i + fanout]
        bound = lower if i == 0 else chunk[0].smallest_key
        parts.append(_build_partition(ctx, bound, chunk))
    return parts
