"""Physical snapshot algorithms: NS, COU, Fork, ZZ, PP, HG and PB.

Each class keeps the client-side read/write rule and the snapshotter-side
take/traverse steps of one algorithm. Store 0 of a pair is ``D`` and store 1
is ``D̄``; a designator (``_pu``) names the store currently playing ``pU``.
"""

from __future__ import annotations

import hashlib
import logging
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path
from typing import Any, Optional, Type

import numpy as np

from .core import (
    LatchTable,
    PageImage,
    SnapshotAlgorithm,
    SnapshotHandle,
    TriStateArray,
    make_bits,
)
from .errors import ConfigError, SnapshotError, UnsupportedPlatformError
from .persist import SnapshotSink

logger = logging.getLogger(__name__)

FORK_AVAILABLE = hasattr(os, "fork") and sys.platform not in ("win32", "emscripten", "wasi")


class NaiveSnapshot(SnapshotAlgorithm):
    """Block the client, bulk copy D into D̄, then dump D̄."""

    name = "ns"

    def _allocate_state(self, initial: Any) -> None:
        self.live = self._new_store(initial)
        self.shadow = self._new_store()

    def read(self, index: int) -> np.ndarray:
        return self.live.get(index)

    def write(self, index: int, value: int) -> None:
        self._check_index(index)
        with self._client_lock:
            self.live.put(index, value)
        self.counters.logical_writes += 1
        self.counters.physical_writes += 1

    def take_snapshot(self) -> None:
        with self._client_lock:
            self.shadow.copy_from(self.live)
        self.counters.sync_page_copies += self.page_count
        self.counters.taken_ops += self.page_count

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        for i in range(self.page_count):
            sink.emit_page(i, self.shadow.get(i))

    def snapshot_view_checksum(self) -> str:
        return self.shadow.checksum()


class CopyOnUpdateSnapshot(SnapshotAlgorithm):
    """Copy a page into D̄ on its first client write during an access phase."""

    name = "cou"

    def _allocate_state(self, initial: Any) -> None:
        self.live = self._new_store(initial)
        self.shadow = self._new_store()
        self.dirty = make_bits(self.page_count, 0)
        self.latches = LatchTable(self.page_count)
        self._access_active = False

    def read(self, index: int) -> np.ndarray:
        return self.live.get(index)

    def write(self, index: int, value: int) -> None:
        self._check_index(index)
        with self._client_lock:
            if self._access_active and not self.dirty[index]:
                with self.latches.latch(index):
                    self.shadow.copy_page_from(self.live, index)
                    self.dirty[index] = 1
                    self.live.put(index, value)
                self.counters.sync_page_copies += 1
            else:
                self.live.put(index, value)
        self.counters.logical_writes += 1
        self.counters.physical_writes += 1

    def take_snapshot(self) -> None:
        with self._client_lock:
            self.dirty.setall(0)
            self._access_active = True
        self.counters.bit_ops += self.page_count
        self.counters.taken_ops += self.page_count

    def _snapshot_page(self, index: int) -> np.ndarray:
        with self.latches.latch(index):
            source = self.shadow if self.dirty[index] else self.live
            return source.get(index).copy()

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        for i in range(self.page_count):
            sink.emit_page(i, self._snapshot_page(i))

    def _after_access(self) -> None:
        with self._client_lock:
            self._access_active = False

    def snapshot_view_checksum(self) -> str:
        view = np.stack([self._snapshot_page(i) for i in range(self.page_count)])
        return _digest(view)


def _digest(pages: np.ndarray) -> str:
    return hashlib.blake2b(pages.tobytes(), digest_size=16).hexdigest()


class ForkHandle(SnapshotHandle):
    """Completion of a fork child, polled without blocking."""

    def __init__(self, checkpoint_id: int, owner: "ForkSnapshot"):
        super().__init__(checkpoint_id)
        self._owner = owner

    def done(self) -> bool:
        if not self._done.is_set():
            self._owner._reap(block=False)
        return self._done.is_set()

    def wait(self, timeout: Optional[float] = None) -> Any:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._done.is_set():
            if deadline is None:
                self._owner._reap(block=True)
            elif time.monotonic() >= deadline:
                break
            else:
                self._owner._reap(block=False)
                time.sleep(0.001)
        return super().wait(0)


class ForkSnapshot(SnapshotAlgorithm):
    """Duplicate the process; the child dumps its copy-on-write view of D.

    The parent resumes writing as soon as ``fork()`` returns. Page-store
    accounting is logical (2x) because the OS shares pages until written.
    """

    name = "fork"
    os_shared = True

    def __init__(self, *args: Any, spill_dir: Optional[str] = None, **kwargs: Any):
        if not FORK_AVAILABLE:
            raise UnsupportedPlatformError("fork snapshots need os.fork()")
        self.spill_dir = Path(spill_dir or tempfile.gettempdir())
        self._child_pid: Optional[int] = None
        self._child_handle: Optional[ForkHandle] = None
        self._parent_pid = os.getpid()
        super().__init__(*args, **kwargs)

    def _allocate_state(self, initial: Any) -> None:
        self.live = self._new_store(initial)
        # the child's copy-on-write view, counted logically
        self.allocated_page_bytes += self.live.nbytes

    def read(self, index: int) -> np.ndarray:
        return self.live.get(index)

    def write(self, index: int, value: int) -> None:
        self._check_index(index)
        self.live.put(index, value)
        self.counters.logical_writes += 1
        self.counters.physical_writes += 1

    def _spill_path(self, checkpoint_id: int) -> Path:
        return self.spill_dir / f"snapkit-fork-{self._parent_pid}-{checkpoint_id}.img"

    def trigger(self) -> Optional[SnapshotHandle]:
        if not self.previous_snapshot_done():
            self.counters.skipped_triggers += 1
            return None
        if self._current is not None:
            self.completed.append(self._current)
        self._checkpoint_id += 1
        handle = ForkHandle(self._checkpoint_id, self)
        started = time.perf_counter()
        self.take_snapshot()
        handle.taken_seconds = time.perf_counter() - started
        handle.taken_ops = self.page_count
        handle.access_started = time.perf_counter()
        self.counters.triggers += 1
        self._child_handle = handle
        self._current = handle
        return handle

    def take_snapshot(self) -> None:
        checkpoint_id = self._checkpoint_id
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DeprecationWarning)
            pid = os.fork()
        if pid == 0:
            code = 1
            try:
                self._child_dump(checkpoint_id)
                code = 0
            finally:
                os._exit(code)
        self._child_pid = pid
        # page-table duplication is proportional to the mapped pages
        self.counters.taken_ops += self.page_count

    def _child_dump(self, checkpoint_id: int) -> None:
        if self.sink.cross_process:
            self.sink.open(checkpoint_id, incremental=False)
            self.traverse_snapshot(self.sink)
            self.sink.close()
        else:
            PageImage(self.live.pages).save(self._spill_path(checkpoint_id))

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        for i in range(self.page_count):
            sink.emit_page(i, self.live.get(i))

    def _reap(self, block: bool) -> None:
        handle = self._child_handle
        if self._child_pid is None or handle is None:
            return
        pid, status = os.waitpid(self._child_pid, 0 if block else os.WNOHANG)
        if pid == 0:
            return
        self._child_pid = None
        self._child_handle = None
        checkpoint_id = handle.checkpoint_id
        exit_code = os.waitstatus_to_exitcode(status)
        if exit_code != 0:
            logger.error("fork child for checkpoint %d exited with %d", checkpoint_id, exit_code)
            handle._finish(error=SnapshotError(f"fork child exited with status {exit_code}"))
            return
        try:
            if self.sink.cross_process:
                result = self.sink.adopt(checkpoint_id)
            else:
                spill = self._spill_path(checkpoint_id)
                image = PageImage.load(spill, self.item_size)
                spill.unlink()
                result = self.sink.adopt(checkpoint_id, image)
        except Exception as e:
            handle._finish(error=e)
        else:
            handle._finish(result=result)

    def close(self) -> None:
        if self._child_handle is not None:
            self._reap(block=True)
        super().close()


class ZigzagSnapshot(SnapshotAlgorithm):
    """Two copies with per-page read-from / write-to bits.

    The client writes copy ``write_to[i]``; the snapshotter reads copy
    ``not write_to[i]``, which the client never touches during an access phase.
    """

    name = "zz"

    def _allocate_state(self, initial: Any) -> None:
        self.copies = (self._new_store(initial), self._new_store(initial))
        self.read_from = make_bits(self.page_count, 0)
        self.write_to = make_bits(self.page_count, 1)

    @property
    def a(self):
        return self.copies[0]

    @property
    def b(self):
        return self.copies[1]

    def read(self, index: int) -> np.ndarray:
        return self.copies[self.read_from[index]].get(index)

    def write(self, index: int, value: int) -> None:
        self._check_index(index)
        with self._client_lock:
            side = self.write_to[index]
            self.copies[side].put(index, value)
            self.read_from[index] = side
        self.counters.logical_writes += 1
        self.counters.physical_writes += 1

    def take_snapshot(self) -> None:
        with self._client_lock:
            self.write_to = ~self.read_from
        self.counters.bit_ops += self.page_count
        self.counters.taken_ops += self.page_count

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        write_to = self.write_to
        for i in range(self.page_count):
            sink.emit_page(i, self.copies[1 - write_to[i]].get(i))

    def snapshot_view_checksum(self) -> str:
        write_to = self.write_to
        view = np.stack([self.copies[1 - write_to[i]].get(i) for i in range(self.page_count)])
        return _digest(view)


class PingPongSnapshot(SnapshotAlgorithm):
    """Write D and the update buffer; swap update/durable buffers at trigger.

    The durable buffer's dirty bits are cleared while it is traversed, so the
    swap itself stays O(1).
    """

    name = "pp"
    incremental = True
    store_multiplier = 3
    constant_taken_phase = True

    def _allocate_state(self, initial: Any) -> None:
        self.live = self._new_store(initial)
        self.buffers = (self._new_store(), self._new_store())
        self.dirty = (make_bits(self.page_count, 0), make_bits(self.page_count, 0))
        self._u = 0

    @property
    def update_buf(self):
        return self.buffers[self._u]

    @property
    def durable_buf(self):
        return self.buffers[1 - self._u]

    @property
    def update_dirty(self):
        return self.dirty[self._u]

    @property
    def durable_dirty(self):
        return self.dirty[1 - self._u]

    def read(self, index: int) -> np.ndarray:
        return self.live.get(index)

    def write(self, index: int, value: int) -> None:
        self._check_index(index)
        with self._client_lock:
            u = self._u
            self.live.put(index, value)
            self.buffers[u].put(index, value)
            self.dirty[u][index] = 1
        self.counters.logical_writes += 1
        self.counters.physical_writes += 2

    def take_snapshot(self) -> None:
        with self._client_lock:
            self._u ^= 1
        self.counters.swaps += 1
        self.counters.taken_ops += 1

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        d = 1 - self._u
        bits, store = self.dirty[d], self.buffers[d]
        for i in range(self.page_count):
            if bits[i]:
                bits[i] = 0
                sink.emit_page(i, store.get(i))
            else:
                sink.emit_from_last(i)

    def snapshot_view_checksum(self) -> str:
        return self.durable_buf.checksum(self.durable_dirty.search(1))


class HourglassSnapshot(SnapshotAlgorithm):
    """Zigzag-style read bits plus Ping-Pong pointer swapping over two copies.

    Initial state follows the original formulation: D̄_b1 all zeros, D̄_b2 and
    D̄_br all ones, pU = D. That is only consistent because D = D̄ at start;
    the period-0 access phase traverses D̄ with its all-ones bits, which
    emits checkpoint 0 and clears D̄_b2.
    """

    name = "hg"
    incremental = True
    constant_taken_phase = True

    def _allocate_state(self, initial: Any) -> None:
        self.stores = (self._new_store(initial), self._new_store(initial))
        self.bits = (make_bits(self.page_count, 0), make_bits(self.page_count, 1))
        self.read_from = make_bits(self.page_count, 1)
        self._pu = 0

    def _bootstrap(self) -> None:
        self.sink.open(0, incremental=False)
        self.traverse_snapshot(self.sink)
        self.sink.close()

    @property
    def a(self):
        return self.stores[0]

    @property
    def b(self):
        return self.stores[1]

    @property
    def bits_a(self):
        return self.bits[0]

    @property
    def bits_b(self):
        return self.bits[1]

    @property
    def pu(self) -> int:
        return self._pu

    @property
    def pd(self) -> int:
        return 1 - self._pu

    def read(self, index: int) -> np.ndarray:
        return self.stores[self.read_from[index]].get(index)

    def write(self, index: int, value: int) -> None:
        self._check_index(index)
        with self._client_lock:
            pu = self._pu
            self.bits[pu][index] = 1
            self.stores[pu].put(index, value)
            self.read_from[index] = pu
        self.counters.logical_writes += 1
        self.counters.physical_writes += 1

    def take_snapshot(self) -> None:
        with self._client_lock:
            self._pu ^= 1  # swap(pU, pD) and swap(pU_b, pD_b)
        self.counters.swaps += 2
        self.counters.taken_ops += 2

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        pd = 1 - self._pu
        bits, store = self.bits[pd], self.stores[pd]
        for i in range(self.page_count):
            if bits[i]:
                bits[i] = 0
                sink.emit_page(i, store.get(i))
            else:
                sink.emit_from_last(i)

    def snapshot_view_checksum(self) -> str:
        pd = 1 - self._pu
        return self.stores[pd].checksum(self.bits[pd].search(1))


class PiggybackSnapshot(SnapshotAlgorithm):
    """Hourglass with a three-state flag array and piggyback copies.

    After the swap, WriteToOnline copies every page whose latest version sits
    on the pD side into pU, so pU is fully current by the end of the period
    and pD always holds a full snapshot.
    """

    name = "pb"
    constant_taken_phase = True

    def _allocate_state(self, initial: Any) -> None:
        self.stores = (self._new_store(initial), self._new_store(initial))
        self.flags = TriStateArray(self.page_count)
        self.latches = LatchTable(self.page_count)
        self._pu = 0
        self.last_piggyback: list[int] = []

    @property
    def a(self):
        return self.stores[0]

    @property
    def b(self):
        return self.stores[1]

    @property
    def pu(self) -> int:
        return self._pu

    @property
    def pd(self) -> int:
        return 1 - self._pu

    def read(self, index: int) -> np.ndarray:
        return self.stores[1 if self.flags.values[index] == 2 else 0].get(index)

    def write(self, index: int, value: int) -> None:
        self._check_index(index)
        with self._client_lock:
            pu = self._pu
            with self.latches.latch(index):
                self.stores[pu].put(index, value)
                self.flags.values[index] = pu + 1
        self.counters.logical_writes += 1
        self.counters.physical_writes += 1

    def take_snapshot(self) -> None:
        with self._client_lock:
            self._pu ^= 1
        self.counters.swaps += 1
        self.counters.taken_ops += 1

    def write_to_online(self) -> list[int]:
        """Copy out-of-date pU pages from pD; skip pages the client re-flagged."""
        pu = self._pu
        pd = 1 - pu
        stale_flag = pd + 1
        src, dst = self.stores[pd], self.stores[pu]
        flags = self.flags.values
        copied = []
        for k in self.flags.candidates(stale_flag):
            k = int(k)
            with self.latches.latch(k):
                if flags[k] == stale_flag:
                    dst.copy_page_from(src, k)
                    flags[k] = 0
                    copied.append(k)
        self.counters.async_page_copies += len(copied)
        self.last_piggyback = copied
        return copied

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        self.write_to_online()
        store = self.stores[1 - self._pu]
        for i in range(self.page_count):
            sink.emit_page(i, store.get(i))

    def snapshot_view_checksum(self) -> str:
        return self.stores[1 - self._pu].checksum()


ALGORITHMS: dict[str, Type[SnapshotAlgorithm]] = {
    "ns": NaiveSnapshot,
    "cou": CopyOnUpdateSnapshot,
    "fork": ForkSnapshot,
    "zz": ZigzagSnapshot,
    "pp": PingPongSnapshot,
    "hg": HourglassSnapshot,
    "pb": PiggybackSnapshot,
}

# Comparison of the physical algorithms; "(*)" marks the drawback.
ALGORITHM_TABLE = [
    # id, average latency, latency spike, taken-phase complexity, max throughput, full snapshot, memory
    ("ns", "low", "(*) high", "(*) O(n)", "low", "yes", "2x"),
    ("cou", "(*) high", "(*) middle", "(*) O(n)", "middle", "yes", "2x"),
    ("fork", "low", "(*) middle", "(*) O(n)", "high", "yes", "2x"),
    ("zz", "middle", "(*) middle", "(*) O(n)", "middle", "yes", "2x"),
    ("pp", "(*) high", "almost none", "O(1)", "low", "no", "(*) 3x"),
    ("hg", "low", "almost none", "O(1)", "high", "no", "2x"),
    ("pb", "low", "almost none", "O(1)", "high", "yes", "2x"),
]


def available_algorithms() -> dict[str, bool]:
    """Algorithm id -> whether it can run on this platform."""
    return {name: (FORK_AVAILABLE if name == "fork" else True) for name in ALGORITHMS}


def memory_multiplier(algo_id: str) -> int:
    return get_algorithm_class(algo_id).store_multiplier


def get_algorithm_class(algo_id: str) -> Type[SnapshotAlgorithm]:
    try:
        return ALGORITHMS[algo_id]
    except KeyError:
        raise ConfigError(f"unknown algorithm {algo_id!r}; choose from {', '.join(ALGORITHMS)}") from None


def create_algorithm(algo_id: str, page_count: int, **kwargs: Any) -> SnapshotAlgorithm:
    """Instantiate an algorithm by its stable identifier."""
    cls = get_algorithm_class(algo_id)
    if cls is ForkSnapshot and not FORK_AVAILABLE:
        raise UnsupportedPlatformError("fork is unsupported on this platform")
    return cls(page_count, **kwargs)


def describe_algorithms() -> list[dict[str, str]]:
    keys = ("id", "avg_latency", "latency_spike", "taken_complexity", "max_throughput", "full_snapshot", "memory")
    rows = [dict(zip(keys, row)) for row in ALGORITHM_TABLE]
    for row in rows:
        row["available"] = "yes" if available_algorithms()[row["id"]] else "unsupported"
    return rows
