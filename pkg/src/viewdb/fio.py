"""File I/O layer with byte accounting and crash-point injection.

All store writes (tables, view files, WAL, manifest) funnel through a
FileOps instance so that:
  * write amplification can be measured as bytes handed to the OS, and
  * tests can kill the process at an exact write, optionally leaving a
    torn (prefix-only) final write behind, to exercise recovery.
"""
from __future__ import annotations

import os
import threading


class SimulatedCrash(Exception):
    """Raised by fault injection in place of the scheduled write."""


SECTOR = 512


class FaultPlan:
    """Crash after `ops` more countable operations; optionally write a
    prefix of the final operation's payload first. Torn writes happen at
    sector granularity: writes within one 512-byte sector are atomic."""

    def __init__(self, ops: int, partial_fraction: float = 0.0):
        self.remaining = ops
        self.partial_fraction = partial_fraction

    def tick(self) -> tuple[bool, float]:
        self.remaining -= 1
        if self.remaining < 0:
            raise SimulatedCrash("fault plan exhausted twice")
        return self.remaining == 0, self.partial_fraction


class FileOps:
    def __init__(self, sync: bool = False):
        self.sync = sync
        self.bytes_written = 0
        self.write_ops = 0
        self.fault: FaultPlan | None = None
        self._lock = threading.Lock()

    # -- fault plumbing ----------------------------------------------------

    def _write_raw(self, fd: int, off: int, data: bytes) -> None:
        with self._lock:
            if self.fault is not None:
                fire, frac = self.fault.tick()
                if fire:
                    keep = (int(len(data) * frac) // SECTOR) * SECTOR
                    if keep:
                        os.pwrite(fd, data[:keep], off)
                    raise SimulatedCrash(f"crash at write op {self.write_ops}")
            os.pwrite(fd, data, off)
            self.bytes_written += len(data)
            self.write_ops += 1

    # -- public ops --------------------------------------------------------

    def open_rw(self, path: str) -> int:
        return os.open(path, os.O_RDWR | os.O_CREAT, 0o644)

    def pwrite(self, fd: int, off: int, data: bytes) -> None:
        self._write_raw(fd, off, data)

    def fsync(self, fd: int) -> None:
        if self.sync:
            os.fsync(fd)

    def delete(self, path: str) -> None:
        with self._lock:
            if self.fault is not None:
                fire, _ = self.fault.tick()
                if fire:
                    raise SimulatedCrash(f"crash before deleting {path}")
            os.unlink(path)

    def writer(self, path: str, buffer_bytes: int = 1 << 18) -> "BufferedWriter":
        return BufferedWriter(self, path, buffer_bytes)


class BufferedWriter:
    """Append-only writer used while building table and view files.

    Buffered bytes are lost on a simulated crash, mirroring a user-space
    buffer that never reached the OS.
    """

    def __init__(self, ops: FileOps, path: str, buffer_bytes: int):
        self.ops = ops
        self.path = path
        self.fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        self._buf = bytearray()
        self._cap = buffer_bytes
        self._off = 0

    def write(self, data: bytes) -> None:
        self._buf += data
        if len(self._buf) >= self._cap:
            self.flush()

    def tell(self) -> int:
        return self._off + len(self._buf)

    def flush(self) -> None:
        if self._buf:
            data = bytes(self._buf)
            self._buf.clear()
            self.ops._write_raw(self.fd, self._off, data)
            self._off += len(data)

    def close(self) -> None:
        try:
            self.flush()
            self.ops.fsync(self.fd)
        finally:
            os.close(self.fd)

    def abandon(self) -> None:
        os.close(self.fd)
