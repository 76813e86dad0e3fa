"""Exception hierarchy for the store."""


class StoreError(Exception):
    """Base class for all store errors."""


class CorruptionError(StoreError):
    """A file failed a magic, checksum, or structural validity check."""


class OrderingError(StoreError):
    """Input that must be sorted and duplicate-free was not."""


class CapacityError(StoreError):
    """A fixed limit was exceeded (run count, entry size, group size)."""


class AddressingError(StoreError):
    """A cursor or in-group position does not address a real entry."""


class BindingError(StoreError):
    """A persisted view was opened against the wrong set of runs."""


class LogFullError(StoreError):
    """The write-ahead log reached its configured maximum size."""


class MemTableSealedError(StoreError):
    """Write attempted on a frozen MemTable."""


class StoreBusy(StoreError):
    """Back-pressure: an immutable MemTable is already pending."""
