"""Page-array data model, the snapshot algorithm framework and the replay oracle.

A dataset is a fixed array of equally sized pages. Every snapshot algorithm
exposes the same client/snapshotter surface: the client thread calls
``read``/``write``; the snapshotter calls ``trigger``, which performs the
taken phase (``take_snapshot``) and hands the access phase
(``traverse_snapshot``) to a background worker thread.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import struct
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, ClassVar, Iterable, Optional, Sequence, Union

import numpy as np
from bitarray import bitarray

from . import config
from .errors import PageIndexError, SnapshotError, SnapshotFormatError, StoreShapeError, TraceError

if TYPE_CHECKING:
    from .persist import SnapshotSink

logger = logging.getLogger(__name__)

_IMAGE_HEADER = struct.Struct("<8sQ")

BitArray = bitarray


def make_bits(page_count: int, value: int = 0) -> bitarray:
    """Create a page-count long bit array with every flag set to ``value``."""
    bits = bitarray(page_count, endian="little")
    bits.setall(value)
    return bits


def item_dtype(item_size: int) -> np.dtype:
    """Numpy dtype for unsigned little-endian items of ``item_size`` bytes."""
    try:
        return np.dtype(config.ITEM_DTYPES[item_size])
    except KeyError:
        raise StoreShapeError(
            f"item_size must be one of {sorted(config.ITEM_DTYPES)}, got {item_size}"
        ) from None


def pages_for_megabytes(dataset_mb: float, page_size: int = config.PAGE_SIZE) -> int:
    """Number of pages holding ``dataset_mb`` megabytes (at least one)."""
    return max(1, int(dataset_mb * (1 << 20)) // page_size)


@dataclass
class PageImage:
    """A materialized snapshot: every page of a store at one logical time."""

    pages: np.ndarray
    logical_time: int = 0

    @property
    def page_count(self) -> int:
        return int(self.pages.shape[0])

    @property
    def page_size(self) -> int:
        return int(self.pages.shape[1] * self.pages.dtype.itemsize)

    @property
    def nbytes(self) -> int:
        return int(self.pages.nbytes)

    def values(self) -> list[int]:
        """First item of every page (the whole page in one-item-per-page mode)."""
        return [int(v) for v in self.pages[:, 0]]

    def equals(self, other: "PageImage") -> bool:
        """Same shape and identical bytes."""
        return self.pages.shape == other.pages.shape and bool(
            np.array_equal(self.pages, other.pages)
        )

    def diff(self, other: "PageImage") -> np.ndarray:
        """Indices of pages whose bytes differ."""
        if self.pages.shape != other.pages.shape:
            raise StoreShapeError(
                f"image shapes differ: {self.pages.shape} vs {other.pages.shape}"
            )
        return np.flatnonzero(np.any(self.pages != other.pages, axis=1))

    def to_bytes(self) -> bytes:
        """Image header followed by the raw page array."""
        return _IMAGE_HEADER.pack(config.IMAGE_MAGIC, self.page_count) + self.pages.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, item_size: int = config.ITEM_SIZE) -> "PageImage":
        """Parse ``to_bytes`` output.

        Only the page count is stored; the items per page follow from the
        payload length. Raises ``SnapshotFormatError`` on a malformed header
        or a payload that does not split evenly into pages.
        """
        if len(data) < _IMAGE_HEADER.size:
            raise SnapshotFormatError("image shorter than its header")
        magic, page_count = _IMAGE_HEADER.unpack_from(data)
        if magic != config.IMAGE_MAGIC:
            raise SnapshotFormatError(f"bad image magic {magic!r}")
        payload = memoryview(data)[_IMAGE_HEADER.size:]
        if page_count == 0 or len(payload) % page_count:
            raise SnapshotFormatError(
                f"payload of {len(payload)} bytes does not split into {page_count} pages"
            )
        dtype = item_dtype(item_size)
        items = len(payload) // page_count // dtype.itemsize
        pages = np.frombuffer(payload, dtype=dtype).reshape(page_count, items).copy()
        return cls(pages)

    def save(self, path: Union[str, Path]) -> Path:
        """Write ``to_bytes()`` to ``path``."""
        path = Path(path)
        try:
            path.write_bytes(self.to_bytes())
        except OSError as e:
            raise OSError(f"could not write image {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: Union[str, Path], item_size: int = config.ITEM_SIZE) -> "PageImage":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise OSError(f"could not read image {path}: {e}") from e
        return cls.from_bytes(data, item_size)


class PageStore:
    """A contiguous array of fixed-size pages.

    The store provides no synchronization; algorithms supply their own.
    An update ``put(index, value)`` rewrites the whole page: every item slot
    takes ``value``.
    """

    def __init__(
        self,
        page_count: int,
        page_size: int = config.PAGE_SIZE,
        item_size: int = config.ITEM_SIZE,
        initial: Any = None,
    ):
        if page_count < 1:
            raise StoreShapeError(f"page_count must be >= 1, got {page_count}")
        if page_size < 1 or item_size < 1:
            raise StoreShapeError("page_size and item_size must be positive")
        if page_size % item_size:
            raise StoreShapeError(
                f"page_size {page_size} is not a multiple of item_size {item_size}"
            )
        self.page_count = page_count
        self.page_size = page_size
        self.item_size = item_size
        self.items_per_page = page_size // item_size
        self.pages = np.zeros((page_count, self.items_per_page), dtype=item_dtype(item_size))
        if initial is not None:
            self.load(initial)

    @property
    def nbytes(self) -> int:
        return int(self.pages.nbytes)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.page_count, self.page_size, self.item_size)

    def check_index(self, index: int) -> None:
        if not 0 <= index < self.page_count:
            raise PageIndexError(f"page index {index} outside [0, {self.page_count})")

    def load(self, initial: Any) -> None:
        """Fill from a PageImage, another store, a page array or one value per page."""
        if isinstance(initial, PageStore):
            self.copy_from(initial)
            return
        if isinstance(initial, PageImage):
            initial = initial.pages
        data = np.asarray(initial)
        if data.ndim == 1:
            if data.shape[0] != self.page_count:
                raise StoreShapeError(
                    f"{data.shape[0]} initial values for {self.page_count} pages"
                )
            self.pages[:] = data[:, None]
        elif data.shape == self.pages.shape:
            self.pages[:] = data
        else:
            raise StoreShapeError(f"initial data shape {data.shape} != {self.pages.shape}")

    def put(self, index: int, value: int) -> None:
        """Overwrite every item of page ``index`` with ``value``."""
        self.pages[index] = value

    def get(self, index: int) -> np.ndarray:
        """A view of page ``index``. Copy it if the page may change while you hold it."""
        return self.pages[index]

    def read_item(self, index: int, item: int) -> int:
        return int(self.pages[index, item])

    def write_item(self, index: int, item: int, value: int) -> None:
        self.pages[index, item] = value

    def copy_page_from(self, other: "PageStore", index: int) -> None:
        """Copy one page from a store of the same shape."""
        self.pages[index] = other.pages[index]

    def copy_from(self, other: "PageStore") -> None:
        """Bulk copy every page of a store with identical shape."""
        if other.pages.shape != self.pages.shape or other.pages.dtype != self.pages.dtype:
            raise StoreShapeError(f"cannot copy {other.shape} into {self.shape}")
        np.copyto(self.pages, other.pages)

    def equals(self, other: "PageStore") -> bool:
        return self.pages.shape == other.pages.shape and bool(
            np.array_equal(self.pages, other.pages)
        )

    def checksum(self, indices: Optional[Iterable[int]] = None) -> str:
        """BLAKE2b digest of every page, or of ``indices`` in the order given."""
        digest = hashlib.blake2b(digest_size=16)
        if indices is None:
            digest.update(self.pages.tobytes())
        else:
            for i in indices:
                digest.update(self.pages[i].tobytes())
        return digest.hexdigest()

    def to_image(self, logical_time: int = 0) -> PageImage:
        """Independent copy of the pages as a PageImage."""
        return PageImage(self.pages.copy(), logical_time)


def create_store(
    page_count: int,
    page_size: int = config.PAGE_SIZE,
    item_size: int = config.ITEM_SIZE,
    initial: Any = None,
) -> PageStore:
    """Create a zero-initialized store, or one filled from ``initial``."""
    return PageStore(page_count, page_size, item_size, initial)


class TriStateArray:
    """Per-page flags drawn from {0, 1, 2}."""

    STATES = (0, 1, 2)

    def __init__(self, page_count: int):
        self.values = np.zeros(page_count, dtype=np.uint8)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __getitem__(self, index: int) -> int:
        return int(self.values[index])

    def __setitem__(self, index: int, state: int) -> None:
        if state not in self.STATES:
            raise ValueError(f"flag state must be 0, 1 or 2, got {state}")
        self.values[index] = state

    def candidates(self, state: int) -> np.ndarray:
        """Indices currently holding ``state``."""
        return np.flatnonzero(self.values == state)

    def tolist(self) -> list[int]:
        return [int(v) for v in self.values]


class LatchTable:
    """Striped per-page mutual-exclusion latches."""

    def __init__(self, page_count: int, stripes: int = config.LATCH_STRIPES):
        self._stripes = max(1, min(stripes, page_count))
        self._latches = [threading.Lock() for _ in range(self._stripes)]

    def latch(self, index: int) -> threading.Lock:
        """The lock guarding page ``index``; pages on the same stripe share it."""
        return self._latches[index % self._stripes]


@dataclass
class AlgorithmCounters:
    """Operation counters maintained by every algorithm."""

    logical_writes: int = 0
    physical_writes: int = 0
    sync_page_copies: int = 0  # copies on the client path or inside the taken phase
    async_page_copies: int = 0  # snapshotter-side copies (WriteToOnline)
    taken_ops: int = 0  # page copies, bit passes and swaps done in taken phases
    bit_ops: int = 0
    swaps: int = 0
    triggers: int = 0
    skipped_triggers: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


class SnapshotHandle:
    """Tracks one checkpoint from trigger to the end of its access phase."""

    def __init__(self, checkpoint_id: int):
        self.checkpoint_id = checkpoint_id
        self.triggered_at = time.perf_counter()
        self.taken_seconds = 0.0
        self.taken_ops = 0
        self.access_started: Optional[float] = None
        self.access_finished: Optional[float] = None
        self.result: Any = None
        self.error: Optional[BaseException] = None
        self._done = threading.Event()

    @property
    def access_seconds(self) -> float:
        """Traverse duration; 0.0 until the access phase has finished."""
        if self.access_started is None or self.access_finished is None:
            return 0.0
        return self.access_finished - self.access_started

    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: Optional[float] = None) -> Any:
        """Block until the access phase ends and return the sink's result.

        Raises ``SnapshotError`` on timeout, chained to the access phase's own
        exception when the checkpoint failed.
        """
        if not self._done.wait(timeout):
            raise SnapshotError(f"checkpoint {self.checkpoint_id} did not finish in {timeout}s")
        if self.error is not None:
            raise SnapshotError(f"checkpoint {self.checkpoint_id} failed: {self.error}") from self.error
        return self.result

    def _finish(self, result: Any = None, error: Optional[BaseException] = None) -> None:
        """Record the outcome and wake waiters. An access end time set earlier is kept."""
        if self.access_finished is None:
            self.access_finished = time.perf_counter()
        self.result = result
        self.error = error
        self._done.set()


class SnapshotWorker:
    """Background snapshotter thread that runs access phases in order."""

    def __init__(self, name: str = "snapshotter"):
        self.name = name
        self._queue: queue.Queue[tuple[Callable[[], Any], SnapshotHandle]] = queue.Queue()
        self._stop_event = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def start(self) -> None:
        if self.running:
            return
        self._stop_event.clear()
        self._thread = threading.Thread(target=self._worker_loop, name=self.name, daemon=True)
        self._thread.start()

    def stop(self, timeout: float = 5.0) -> None:
        """Stop once queued jobs have run, joining for at most ``timeout`` seconds."""
        self._stop_event.set()
        if self._thread is not None:
            self._thread.join(timeout=timeout)
            self._thread = None

    def submit(self, job: Callable[[], Any], handle: SnapshotHandle) -> None:
        """Queue ``job``; ``handle`` is finished with its return value or exception."""
        self.start()
        self._queue.put((job, handle))

    def _worker_loop(self) -> None:
        while not self._stop_event.is_set() or not self._queue.empty():
            try:
                job, handle = self._queue.get(timeout=0.05)
            except queue.Empty:
                continue
            handle.access_started = time.perf_counter()
            try:
                result = job()
            except BaseException as e:  # reported through the handle
                logger.error("%s: checkpoint %d failed: %s", self.name, handle.checkpoint_id, e)
                handle._finish(error=e)
            else:
                handle._finish(result=result)


class SnapshotAlgorithm(ABC):
    """Client/snapshotter interface shared by every snapshot algorithm.

    Subclasses allocate their state in ``_allocate_state`` and implement the
    read/write rule, the taken phase and the access phase. Checkpoint 0, the
    initial image, is emitted to the sink during construction.
    """

    name: ClassVar[str] = ""
    incremental: ClassVar[bool] = False
    store_multiplier: ClassVar[int] = 2
    constant_taken_phase: ClassVar[bool] = False

    def __init__(
        self,
        page_count: int,
        page_size: int = config.PAGE_SIZE,
        item_size: int = config.ITEM_SIZE,
        initial: Any = None,
        sink: Optional["SnapshotSink"] = None,
        history: int = 64,
    ):
        if sink is None:
            from .persist import NullSink

            sink = NullSink()
        self.page_count = page_count
        self.page_size = page_size
        self.item_size = item_size
        self.sink = sink
        self.counters = AlgorithmCounters()
        self.allocated_page_bytes = 0
        self.completed: deque[SnapshotHandle] = deque(maxlen=history)
        self._client_lock = threading.Lock()
        self._worker = SnapshotWorker(name=f"{self.name}-snapshotter")
        self._current: Optional[SnapshotHandle] = None
        self._checkpoint_id = 0
        self._allocate_state(initial)
        self._bootstrap()

    # -- allocation ---------------------------------------------------------

    def _new_store(self, initial: Any = None) -> PageStore:
        store = PageStore(self.page_count, self.page_size, self.item_size, initial)
        self.allocated_page_bytes += store.nbytes
        return store

    @property
    def dataset_bytes(self) -> int:
        return self.page_count * self.page_size

    @abstractmethod
    def _allocate_state(self, initial: Any) -> None:
        ...

    def _bootstrap(self) -> None:
        """Emit checkpoint 0 from the current (initial) state."""
        self.sink.open(0, incremental=False)
        for i in range(self.page_count):
            self.sink.emit_page(i, self.read(i))
        self.sink.close()

    # -- client side --------------------------------------------------------

    @abstractmethod
    def read(self, index: int) -> np.ndarray:
        ...

    @abstractmethod
    def write(self, index: int, value: int) -> None:
        ...

    def read_value(self, index: int) -> int:
        return int(self.read(index)[0])

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.page_count:
            raise PageIndexError(f"page index {index} outside [0, {self.page_count})")

    # -- snapshotter side ---------------------------------------------------

    def previous_snapshot_done(self) -> bool:
        return self._current is None or self._current.done()

    @property
    def checkpoint_id(self) -> int:
        return self._checkpoint_id

    def trigger(self) -> Optional[SnapshotHandle]:
        """Start a checkpoint if the previous one is done; ``None`` otherwise."""
        if not self.previous_snapshot_done():
            self.counters.skipped_triggers += 1
            logger.debug("%s: trigger skipped, checkpoint %d still running", self.name, self._checkpoint_id)
            return None
        if self._current is not None:
            self.completed.append(self._current)
        self._checkpoint_id += 1
        handle = SnapshotHandle(self._checkpoint_id)
        ops_before = self.counters.taken_ops
        started = time.perf_counter()
        self.take_snapshot()
        handle.taken_seconds = time.perf_counter() - started
        handle.taken_ops = self.counters.taken_ops - ops_before
        self.counters.triggers += 1
        self._current = handle
        self._launch_access(handle)
        return handle

    def _launch_access(self, handle: SnapshotHandle) -> None:
        self._worker.submit(lambda: self._access_phase(handle.checkpoint_id), handle)

    def _access_phase(self, checkpoint_id: int) -> Any:
        try:
            self.sink.open(checkpoint_id, incremental=self.incremental)
            try:
                self.traverse_snapshot(self.sink)
            except BaseException:
                self.sink.abort()
                raise
            return self.sink.close()
        finally:
            self._after_access()

    def _after_access(self) -> None:
        """Hook run by the snapshotter once the sink is closed."""

    @abstractmethod
    def take_snapshot(self) -> None:
        ...

    @abstractmethod
    def traverse_snapshot(self, sink: "SnapshotSink") -> None:
        ...

    def cycle(self, timeout: Optional[float] = None) -> Any:
        """Trigger one checkpoint and wait for its access phase to finish."""
        handle = self.trigger()
        if handle is None:
            raise SnapshotError("previous snapshot not done")
        return handle.wait(timeout)

    def wait_idle(self, timeout: Optional[float] = None) -> None:
        if self._current is not None:
            self._current.wait(timeout)

    def handles(self) -> list[SnapshotHandle]:
        """Every checkpoint handle triggered so far (bounded by ``history``)."""
        items = list(self.completed)
        if self._current is not None and (not items or items[-1] is not self._current):
            items.append(self._current)
        return items

    def close(self) -> None:
        if self._current is not None and not self._current.done():
            self._current._done.wait()
        self._worker.stop()

    def __enter__(self) -> "SnapshotAlgorithm":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def update_arrays(trace: Any) -> tuple[np.ndarray, np.ndarray]:
    """(indices, values) arrays of a trace object or a sequence of pairs."""
    if hasattr(trace, "indices") and hasattr(trace, "values"):
        return np.asarray(trace.indices), np.asarray(trace.values)
    pairs = np.asarray(list(trace), dtype=np.int64).reshape(-1, 2)
    return pairs[:, 0], pairs[:, 1]


def oracle_replay(initial: Any, trace: Union[Any, Sequence[tuple[int, int]]], upto: int) -> PageImage:
    """Apply trace entries ``[0, upto)`` to ``initial`` and return the image.

    This is the ground truth a snapshot triggered after exactly ``upto``
    committed updates must equal byte for byte.
    """
    image = initial if isinstance(initial, PageImage) else None
    if image is None:
        if isinstance(initial, PageStore):
            image = initial.to_image()
        else:
            raise TypeError("initial must be a PageImage or PageStore")
    indices, values = update_arrays(trace)
    if not 0 <= upto <= len(indices):
        raise TraceError(f"upto {upto} outside [0, {len(indices)}]")
    pages = image.pages.copy()
    if upto:
        idx = indices[:upto]
        if idx.min() < 0 or idx.max() >= pages.shape[0]:
            raise PageIndexError(f"trace index outside [0, {pages.shape[0]})")
        # the last write of each page wins
        rev_idx = idx[::-1]
        touched, first = np.unique(rev_idx, return_index=True)
        last_values = values[:upto][::-1][first]
        pages[touched] = last_values.astype(pages.dtype)[:, None]
    return PageImage(pages, logical_time=upto)
