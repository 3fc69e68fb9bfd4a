"""Transactional ("virtual") snapshot engines and the strict-2PL executor.

Three engines share one interface (``begin``/``apply``/``commit``/
``rollback`` plus ``trigger``):

* ``CalcEngine``: a single live copy with phase-based copy-on-update.
* ``VirtualHourglass`` / ``VirtualPiggyback``: the physical HG/PB layouts
  where every transaction binds to the pU side current when it starts, and
  the snapshotter waits for transactions of earlier epochs before traversing.

A transaction "starts" once it holds all of its page locks.
"""

from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import config
from .algorithms import HourglassSnapshot, PiggybackSnapshot
from .core import LatchTable, PageImage, PageStore, SnapshotAlgorithm, make_bits
from .errors import ConfigError, SnapshotError, TransactionAborted
from .persist import SnapshotSink

logger = logging.getLogger(__name__)

_txn_ids = itertools.count(1)


class TxnStatus(str, Enum):
    ACTIVE = "active"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass
class Transaction:
    """A unit of work over a fixed page write set."""

    writes: list[tuple[int, int]]
    reads: list[int] = field(default_factory=list)
    txn_id: int = field(default_factory=lambda: next(_txn_ids))
    abort_after_write: bool = False
    status: TxnStatus = TxnStatus.ACTIVE
    start_epoch: int = -1
    read_values: dict[int, int] = field(default_factory=dict)
    # engine-private bookkeeping
    side: int = 0
    start_phase: Optional["Phase"] = None
    undo: list[tuple] = field(default_factory=list)
    copied: list[int] = field(default_factory=list)

    @property
    def pages(self) -> list[int]:
        return sorted({p for p, _ in self.writes} | set(self.reads))


@dataclass(frozen=True)
class CommitRecord:
    txn_id: int
    start_epoch: int
    writes: tuple[tuple[int, int], ...]


def commit_log_replay(initial: Any, records: Iterable[CommitRecord]) -> PageImage:
    """Apply committed write sets in commit order; returns the resulting image."""
    if isinstance(initial, PageStore):
        pages = initial.pages.copy()
    elif isinstance(initial, PageImage):
        pages = initial.pages.copy()
    else:
        raise TypeError("initial must be a PageImage or PageStore")
    for record in records:
        for index, value in record.writes:
            pages[index] = value
    return PageImage(pages)


class TransactionalMixin:
    """Commit log shared by the transactional engines."""

    def _init_log(self) -> None:
        self.commit_log: list[CommitRecord] = []
        self._log_lock = threading.Lock()
        # client threads bump counters outside any shared lock
        self._counter_lock = threading.Lock()
        self.max_begin_stall = 0.0

    def _record_commit(self, txn: Transaction) -> None:
        with self._log_lock:
            self.commit_log.append(CommitRecord(txn.txn_id, txn.start_epoch, tuple(txn.writes)))
        txn.status = TxnStatus.COMMITTED

    def _count_write(self, sync_copies: int = 0) -> None:
        with self._counter_lock:
            self.counters.logical_writes += 1
            self.counters.physical_writes += 1
            self.counters.sync_page_copies += sync_copies

    def _note_stall(self, started: float) -> None:
        stall = time.perf_counter() - started
        if stall > self.max_begin_stall:
            self.max_begin_stall = stall

    def write(self, index: int, value: int) -> None:
        """Single-update transaction, for single-threaded tick drivers."""
        self._check_index(index)
        txn = Transaction([(index, value)])
        self.begin(txn)
        self.apply(txn, index, value)
        self.commit(txn)

    def included_records(self, checkpoint_id: int) -> list[CommitRecord]:
        raise NotImplementedError

    def expected_image(self, initial: Any, checkpoint_id: int) -> PageImage:
        """The image checkpoint ``checkpoint_id`` must equal."""
        return commit_log_replay(initial, self.included_records(checkpoint_id))


class EpochTracker:
    """Counts active transactions per start epoch."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self.epoch = 0
        self._active: Counter[int] = Counter()

    def enter(self) -> int:
        with self._cond:
            self._active[self.epoch] += 1
            return self.epoch

    def leave(self, epoch: int) -> None:
        with self._cond:
            self._active[epoch] -= 1
            if self._active[epoch] <= 0:
                del self._active[epoch]
            self._cond.notify_all()

    def advance(self) -> int:
        """Begin a new epoch; returns it."""
        with self._cond:
            self.epoch += 1
            return self.epoch

    def active_before(self, epoch: int) -> int:
        with self._cond:
            return sum(n for e, n in self._active.items() if e < epoch)

    def wait_drained(self, epoch: int, timeout: Optional[float] = None) -> bool:
        """Block until no transaction that started before ``epoch`` is active."""
        with self._cond:
            return self._cond.wait_for(
                lambda: all(e >= epoch for e in self._active), timeout=timeout
            )


class _EpochEngine(TransactionalMixin):
    """Detect-and-wait plumbing for the virtual HG/PB engines."""

    epochs: EpochTracker

    def _init_epochs(self) -> None:
        self._init_log()
        # the swap and the epoch bump happen under one hold
        self._client_lock = threading.RLock()
        self.epochs = EpochTracker()
        self.snapshot_epochs: dict[int, int] = {}

    def begin(self, txn: Transaction) -> None:
        started = time.perf_counter()
        with self._client_lock:
            self._note_stall(started)
            txn.side = self._pu
            txn.start_epoch = self.epochs.enter()

    def commit(self, txn: Transaction) -> None:
        self._record_commit(txn)
        self.epochs.leave(txn.start_epoch)

    def take_snapshot(self) -> None:
        with self._client_lock:
            super().take_snapshot()
            self.snapshot_epochs[self._checkpoint_id] = self.epochs.advance()

    def _access_phase(self, checkpoint_id: int) -> Any:
        epoch = self.snapshot_epochs[checkpoint_id]
        waited = time.perf_counter()
        self.epochs.wait_drained(epoch)
        logger.debug(
            "%s: checkpoint %d waited %.6fs for epoch %d", self.name, checkpoint_id,
            time.perf_counter() - waited, epoch - 1,
        )
        return super()._access_phase(checkpoint_id)

    def included_records(self, checkpoint_id: int) -> list[CommitRecord]:
        epoch = self.snapshot_epochs.get(checkpoint_id, 0)
        with self._log_lock:
            return [r for r in self.commit_log if r.start_epoch < epoch]


class VirtualHourglass(_EpochEngine, HourglassSnapshot):
    """Hourglass whose transactions write the pU side current at their start."""

    name = "vhg"

    def _allocate_state(self, initial: Any) -> None:
        super()._allocate_state(initial)
        self._init_epochs()

    def apply(self, txn: Transaction, index: int, value: int) -> None:
        side = txn.side
        store, bits = self.stores[side], self.bits[side]
        txn.undo.append((index, store.get(index).copy(), bits[index], self.read_from[index]))
        bits[index] = 1
        store.put(index, value)
        self.read_from[index] = side
        self._count_write()

    def rollback(self, txn: Transaction) -> None:
        for index, page, bit, read_from in reversed(txn.undo):
            self.stores[txn.side].pages[index] = page
            self.bits[txn.side][index] = bit
            self.read_from[index] = read_from
        txn.undo.clear()
        txn.status = TxnStatus.ABORTED
        self.epochs.leave(txn.start_epoch)


class VirtualPiggyback(_EpochEngine, PiggybackSnapshot):
    """Piggyback with per-transaction side binding; flags record the side written."""

    name = "vpb"

    def _allocate_state(self, initial: Any) -> None:
        super()._allocate_state(initial)
        self._init_epochs()

    def apply(self, txn: Transaction, index: int, value: int) -> None:
        store = self.stores[txn.side]
        with self.latches.latch(index):
            txn.undo.append((index, store.get(index).copy(), int(self.flags.values[index])))
            store.put(index, value)
            self.flags.values[index] = txn.side + 1
        self._count_write()

    def rollback(self, txn: Transaction) -> None:
        store, other = self.stores[txn.side], self.stores[1 - txn.side]
        for index, page, flag in reversed(txn.undo):
            with self.latches.latch(index):
                if flag == (1 - txn.side) + 1:
                    # latest value is on the other side; WriteToOnline may have passed this page
                    store.copy_page_from(other, index)
                    self.flags.values[index] = 0
                else:
                    store.pages[index] = page
                    self.flags.values[index] = flag
        txn.undo.clear()
        txn.status = TxnStatus.ABORTED
        self.epochs.leave(txn.start_epoch)


class Phase(str, Enum):
    REST = "rest"
    PREPARE = "prepare"
    RESOLVE = "resolve"
    CAPTURE = "capture"
    COMPLETE = "complete"


_COPYING_PHASES = (Phase.PREPARE, Phase.RESOLVE, Phase.CAPTURE)


class CalcEngine(TransactionalMixin, SnapshotAlgorithm):
    """One live copy plus a stable copy written on first update per cycle.

    The snapshot point is the commit-log position where resolve begins.
    Prepare-phase transactions that commit before that point clear the dirty
    bits of the pre-images they created, since their effects are inside the
    snapshot.
    """

    name = "calc"

    def _allocate_state(self, initial: Any) -> None:
        self._init_log()
        self.live = self._new_store(initial)
        self.stable = self._new_store()
        self.dirty = make_bits(self.page_count, 0)
        self.latches = LatchTable(self.page_count)
        self.phase = Phase.REST
        self._phase_cond = threading.Condition()
        self._active: Counter[Phase] = Counter()
        self.snapshot_points: dict[int, int] = {}
        self.phase_log: list[tuple[int, Phase, float]] = []

    def read(self, index: int) -> np.ndarray:
        return self.live.get(index)

    def _set_phase(self, phase: Phase) -> None:
        self.phase = phase
        self.phase_log.append((self._checkpoint_id, phase, time.perf_counter()))
        logger.debug("calc: checkpoint %d enters %s", self._checkpoint_id, phase.value)

    def begin(self, txn: Transaction) -> None:
        started = time.perf_counter()
        with self._phase_cond:
            self._note_stall(started)
            txn.start_phase = self.phase
            txn.start_epoch = self._checkpoint_id
            self._active[self.phase] += 1

    def apply(self, txn: Transaction, index: int, value: int) -> None:
        copied = 0
        with self.latches.latch(index):
            txn.undo.append((index, self.live.get(index).copy()))
            if txn.start_phase in _COPYING_PHASES and not self.dirty[index]:
                self.stable.copy_page_from(self.live, index)
                self.dirty[index] = 1
                txn.copied.append(index)
                copied = 1
            self.live.put(index, value)
        self._count_write(copied)

    def _end(self, txn: Transaction) -> None:
        self._active[txn.start_phase] -= 1
        self._phase_cond.notify_all()

    def commit(self, txn: Transaction) -> None:
        with self._phase_cond:
            if txn.start_phase is Phase.PREPARE and self.phase is Phase.PREPARE:
                for index in txn.copied:
                    with self.latches.latch(index):
                        self.dirty[index] = 0
            self._record_commit(txn)
            self._end(txn)

    def rollback(self, txn: Transaction) -> None:
        for index, page in reversed(txn.undo):
            with self.latches.latch(index):
                self.live.pages[index] = page
        txn.undo.clear()
        txn.status = TxnStatus.ABORTED
        with self._phase_cond:
            self._end(txn)

    def previous_snapshot_done(self) -> bool:
        """A new cycle may start only once the last one is back in REST."""
        return super().previous_snapshot_done() and self.phase is Phase.REST

    def take_snapshot(self) -> None:
        with self._phase_cond:
            self._set_phase(Phase.PREPARE)
        self.counters.taken_ops += 1

    def _access_phase(self, checkpoint_id: int) -> Any:
        with self._phase_cond:
            self._phase_cond.wait_for(
                lambda: self._active[Phase.REST] == 0 and self._active[Phase.COMPLETE] == 0
            )
            with self._log_lock:
                self.snapshot_points[checkpoint_id] = len(self.commit_log)
            self._set_phase(Phase.RESOLVE)
            self._phase_cond.wait_for(lambda: self._active[Phase.PREPARE] == 0)
            self._set_phase(Phase.CAPTURE)
        try:
            return super()._access_phase(checkpoint_id)
        finally:
            with self._phase_cond:
                self._set_phase(Phase.COMPLETE)
                self._phase_cond.wait_for(
                    lambda: self._active[Phase.RESOLVE] == 0 and self._active[Phase.CAPTURE] == 0
                )
                self.dirty.setall(0)
                self.counters.bit_ops += self.page_count
                self._set_phase(Phase.REST)

    def traverse_snapshot(self, sink: SnapshotSink) -> None:
        for i in range(self.page_count):
            with self.latches.latch(i):
                source = self.stable if self.dirty[i] else self.live
                page = source.get(i).copy()
            sink.emit_page(i, page)

    def included_records(self, checkpoint_id: int) -> list[CommitRecord]:
        with self._log_lock:
            return self.commit_log[: self.snapshot_points.get(checkpoint_id, 0)]


class LockManager:
    """Exclusive per-page locks with FIFO waiters and a wait timeout."""

    def __init__(self, timeout: float = config.LOCK_WAIT_TIMEOUT):
        self.timeout = timeout
        self._cond = threading.Condition()
        self._owners: dict[int, int] = {}
        self._waiters: dict[int, deque[int]] = {}

    def acquire(self, txn_id: int, page: int, deadline: float) -> bool:
        with self._cond:
            if self._owners.get(page) == txn_id:
                return True
            waiters = self._waiters.setdefault(page, deque())
            waiters.append(txn_id)
            try:
                while page in self._owners or waiters[0] != txn_id:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return False
                    self._cond.wait(remaining)
                self._owners[page] = txn_id
                return True
            finally:
                waiters.remove(txn_id)
                if not waiters:
                    del self._waiters[page]
                self._cond.notify_all()

    def acquire_all(self, txn_id: int, pages: Sequence[int]) -> bool:
        """Lock ``pages`` in ascending order; on timeout release what was taken."""
        deadline = time.monotonic() + self.timeout
        held = []
        for page in sorted(set(pages)):
            if not self.acquire(txn_id, page, deadline):
                self.release_all(txn_id, held)
                return False
            held.append(page)
        return True

    def release_all(self, txn_id: int, pages: Iterable[int]) -> None:
        with self._cond:
            for page in pages:
                if self._owners.get(page) == txn_id:
                    del self._owners[page]
            self._cond.notify_all()

    def holder(self, page: int) -> Optional[int]:
        with self._cond:
            return self._owners.get(page)


@dataclass
class ExecutionStats:
    committed: int = 0
    aborted: int = 0
    lock_timeouts: int = 0
    elapsed: float = 0.0
    checkpoints: list[int] = field(default_factory=list)
    max_begin_stall: float = 0.0

    @property
    def throughput(self) -> float:
        """Committed transactions per millisecond."""
        return self.committed / (self.elapsed * 1000.0) if self.elapsed > 0 else 0.0


class TransactionExecutor:
    """Runs transactions from ``threads`` client threads under strict 2PL."""

    def __init__(self, engine: Any, threads: int = 1, lock_timeout: float = config.LOCK_WAIT_TIMEOUT):
        if not 1 <= threads <= config.MAX_CLIENT_THREADS:
            raise ConfigError(f"threads must be in [1, {config.MAX_CLIENT_THREADS}], got {threads}")
        self.engine = engine
        self.threads = threads
        self.locks = LockManager(lock_timeout)
        self._stats_lock = threading.Lock()
        self.stats = ExecutionStats()

    def execute(self, txn: Transaction) -> TxnStatus:
        """Lock, run and commit (or roll back) one transaction."""
        pages = txn.pages
        if not self.locks.acquire_all(txn.txn_id, pages):
            txn.status = TxnStatus.ABORTED
            with self._stats_lock:
                self.stats.lock_timeouts += 1
                self.stats.aborted += 1
            return txn.status
        try:
            self.engine.begin(txn)
            try:
                for page in txn.reads:
                    txn.read_values[page] = int(self.engine.read(page)[0])
                for page, value in txn.writes:
                    self.engine.apply(txn, page, value)
                if txn.abort_after_write:
                    raise TransactionAborted(txn.txn_id, "requested by workload")
            except TransactionAborted as e:
                logger.debug("%s", e)
                self.engine.rollback(txn)
            except BaseException:
                self.engine.rollback(txn)
                raise
            else:
                self.engine.commit(txn)
        finally:
            self.locks.release_all(txn.txn_id, pages)
        with self._stats_lock:
            if txn.status is TxnStatus.COMMITTED:
                self.stats.committed += 1
            else:
                self.stats.aborted += 1
        return txn.status

    def _client_loop(self, work: "queue.Queue[Optional[Transaction]]", errors: list) -> None:
        while True:
            txn = work.get()
            if txn is None:
                return
            try:
                self.execute(txn)
            except BaseException as e:
                logger.error("transaction %d failed: %s", txn.txn_id, e)
                errors.append(e)

    def run(
        self,
        transactions: Sequence[Transaction],
        triggers: int = 0,
        snapshot_timeout: Optional[float] = 60.0,
    ) -> ExecutionStats:
        """Execute every transaction, firing ``triggers`` checkpoints spread over the run."""
        work: queue.Queue[Optional[Transaction]] = queue.Queue()
        for txn in transactions:
            work.put(txn)
        for _ in range(self.threads):
            work.put(None)
        errors: list[BaseException] = []
        thresholds = [len(transactions) * (k + 1) // (triggers + 1) for k in range(triggers)]
        handles = []
        started = time.perf_counter()
        workers = [
            threading.Thread(target=self._client_loop, args=(work, errors), name=f"client-{n}", daemon=True)
            for n in range(self.threads)
        ]
        for worker in workers:
            worker.start()
        while thresholds and any(w.is_alive() for w in workers):
            done = self.stats.committed + self.stats.aborted
            if done >= thresholds[0]:
                handle = self.engine.trigger()
                if handle is not None:
                    handles.append(handle)
                    thresholds.pop(0)
            time.sleep(0.0005)
        for worker in workers:
            worker.join()
        self.stats.elapsed = time.perf_counter() - started
        for handle in handles:
            handle.wait(snapshot_timeout)
            self.stats.checkpoints.append(handle.checkpoint_id)
        self.stats.max_begin_stall = getattr(self.engine, "max_begin_stall", 0.0)
        if errors:
            raise SnapshotError(f"{len(errors)} transactions failed; first: {errors[0]}") from errors[0]
        return self.stats


VIRTUAL_ENGINES: dict[str, type] = {
    "calc": CalcEngine,
    "vhg": VirtualHourglass,
    "vpb": VirtualPiggyback,
}


def create_engine(engine_id: str, page_count: int, **kwargs: Any) -> SnapshotAlgorithm:
    try:
        cls = VIRTUAL_ENGINES[engine_id]
    except KeyError:
        raise ConfigError(f"unknown engine {engine_id!r}; choose from {', '.join(VIRTUAL_ENGINES)}") from None
    return cls(page_count, **kwargs)
