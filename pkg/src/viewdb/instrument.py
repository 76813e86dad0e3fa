"""Counted key comparisons.

Every key-vs-key comparison on a query path goes through a CompareStats so
tests and benchmarks can assert exact comparison counts (e.g. that advancing
a view iterator performs none at all).
"""
from __future__ import annotations


class CompareStats:
    """Comparison counter; optionally records the probed keys in order."""

    __slots__ = ("count", "probes", "_record")

    def __init__(self, record_probes: bool = False):
        self.count = 0
        self.probes: list[bytes] = []
        self._record = record_probes

    def compare(self, probe: bytes, target: bytes) -> int:
        """Three-way bytewise comparison, counted. `probe` is the stored key."""
        self.count += 1
        if self._record:
            self.probes.append(probe)
        if probe < target:
            return -1
        if probe > target:
            return 1
        return 0

    def equal(self, probe: bytes, target: bytes) -> bool:
        return self.compare(probe, target) == 0

    def reset(self):
        self.count = 0
        self.probes.clear()
