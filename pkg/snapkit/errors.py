"""Exception hierarchy for snapkit."""


class SnapkitError(Exception):
    """Base class for all snapkit errors."""


class ConfigError(SnapkitError, ValueError):
    """Invalid benchmark configuration."""


class StoreShapeError(SnapkitError, ValueError):
    """Page store sizes are invalid or two stores/files do not match."""


class PageIndexError(SnapkitError, IndexError):
    """A page index is outside [0, page_count)."""


class SnapshotInProgressError(SnapkitError):
    """Work that needs a finished snapshot was requested while one is still running."""


class UnsupportedPlatformError(SnapkitError):
    """The platform cannot run the requested algorithm (fork without os.fork)."""


class SnapshotError(SnapkitError):
    """A traverse, dump or fork child failed."""


class SnapshotFormatError(SnapkitError):
    """A snapshot, image or trace file has a corrupt or unknown header."""


class MergeError(SnapkitError):
    """An incremental snapshot cannot be merged onto the given full snapshot."""


class TraceError(SnapkitError):
    """An update trace is invalid or exhausted."""


class MemoryBudgetError(SnapkitError, MemoryError):
    """A run would allocate more memory than allowed."""


class TransactionAborted(SnapkitError):
    """A transaction was rolled back."""

    def __init__(self, txn_id: int, reason: str):
        super().__init__(f"transaction {txn_id} aborted: {reason}")
        self.txn_id = txn_id
        self.reason = reason
