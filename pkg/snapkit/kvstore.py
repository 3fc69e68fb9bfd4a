"""Embedded hash-table key-value store with a snapshotter thread.

Keys play the role of pages: every slot carries up to two value versions and
the flag state of the configured algorithm (Hourglass bits + read-from, or
the Piggyback tri-state flag). Versions are plain ``bytes`` objects, so
"sharing" a version between both sides costs no copy, and freeing a version
drops the last reference to it.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Union

from . import config
from .algorithms import FORK_AVAILABLE
from .core import SnapshotHandle, SnapshotWorker
from .errors import ConfigError, SnapshotError, SnapshotFormatError, SnapshotInProgressError

logger = logging.getLogger(__name__)

KV_MODES = ("hg", "pb", "fork")

_DUMP_HEADER = struct.Struct("<8sQQ")  # magic, checkpoint id, record count
_LENGTH = struct.Struct("<I")


class Slot:
    __slots__ = ("versions", "bits", "read_from", "flag")

    def __init__(self) -> None:
        self.versions: list[Optional[bytes]] = [None, None]
        self.bits = [0, 0]
        self.read_from = 0
        self.flag = 0

    def nbytes(self) -> int:
        a, b = self.versions
        if a is b:
            return len(a) if a is not None else 0
        return (len(a) if a is not None else 0) + (len(b) if b is not None else 0)

    def version_count(self) -> int:
        a, b = self.versions
        if a is b:
            return 0 if a is None else 1
        return (a is not None) + (b is not None)


@dataclass
class GcLedger:
    reclaimed_versions: int = 0
    bytes_reclaimed: int = 0
    high_water: int = 0

    def __add__(self, other: "GcLedger") -> "GcLedger":
        return GcLedger(
            self.reclaimed_versions + other.reclaimed_versions,
            self.bytes_reclaimed + other.bytes_reclaimed,
            max(self.high_water, other.high_water),
        )


@dataclass
class KvStats:
    live_bytes: int = 0
    high_water: int = 0
    keys: int = 0
    snapshots: int = 0
    skipped_snapshots: int = 0
    max_stall: float = 0.0  # longest client-visible trigger hold, seconds
    gc: GcLedger = field(default_factory=GcLedger)


@dataclass
class SavePolicy:
    """Dump every ``seconds`` if at least ``changes`` writes happened."""

    seconds: float = config.KV_SAVE_SECONDS
    changes: int = config.KV_SAVE_CHANGES

    def due(self, elapsed: float, changes: int) -> bool:
        return elapsed >= self.seconds and changes >= self.changes


class KvDumpSink:
    """Receives one dump at a time; keeps it in memory or writes ``dump_NNNN.kv``."""

    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self.dumps: dict[int, list[tuple[str, bytes]]] = {}
        self.paths: dict[int, Path] = {}
        self._records: list[tuple[str, bytes]] = []
        self._fh = None
        self._path: Optional[Path] = None
        self._checkpoint_id: Optional[int] = None

    def path_for(self, checkpoint_id: int) -> Path:
        if self.directory is None:
            raise SnapshotError("in-memory dump sink has no paths")
        return self.directory / f"dump_{checkpoint_id:04d}.kv"

    def open(self, checkpoint_id: int, count: int) -> None:
        self._checkpoint_id = checkpoint_id
        self._records = []
        if self.directory is not None:
            self._path = self.path_for(checkpoint_id)
            try:
                self._fh = open(self._path, "wb")
                self._fh.write(_DUMP_HEADER.pack(config.KV_MAGIC, checkpoint_id, count))
            except OSError as e:
                raise OSError(f"could not open dump {self._path}: {e}") from e

    def write(self, key: str, value: bytes) -> None:
        if self._fh is not None:
            raw = key.encode()
            self._fh.write(_LENGTH.pack(len(raw)) + raw + _LENGTH.pack(len(value)) + value)
        else:
            self._records.append((key, value))

    def close(self) -> Union[Path, list[tuple[str, bytes]]]:
        checkpoint_id = self._checkpoint_id
        self._checkpoint_id = None
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self.paths[checkpoint_id] = self._path
            return self._path
        self.dumps[checkpoint_id] = self._records
        return self._records

    def abort(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            if self._path is not None and self._path.exists():
                self._path.unlink()
        self._records = []
        self._checkpoint_id = None

    def read(self, checkpoint_id: int) -> list[tuple[str, bytes]]:
        return list(self.iter(checkpoint_id))

    def iter(self, checkpoint_id: int) -> Iterator[tuple[str, bytes]]:
        """Stream a finished dump record by record, without loading a file dump whole."""
        if checkpoint_id in self.dumps:
            yield from self.dumps[checkpoint_id]
        elif checkpoint_id in self.paths:
            yield from iter_kv_dump(self.paths[checkpoint_id])
        else:
            raise SnapshotError(f"dump {checkpoint_id} is not in this sink")


def read_kv_dump(path: Union[str, Path]) -> list[tuple[str, bytes]]:
    """Load a ``SNAPKV01`` dump as ``(key, value)`` pairs in dump order."""
    return list(iter_kv_dump(path))


def iter_kv_dump(path: Union[str, Path]) -> Iterator[tuple[str, bytes]]:
    """Yield the records of a ``SNAPKV01`` dump one at a time."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise OSError(f"could not read dump {path}: {e}") from e
    with fh:
        header = fh.read(_DUMP_HEADER.size)
        if len(header) < _DUMP_HEADER.size:
            raise SnapshotFormatError(f"{path}: shorter than the dump header")
        magic, _, count = _DUMP_HEADER.unpack(header)
        if magic != config.KV_MAGIC:
            raise SnapshotFormatError(f"{path}: bad dump magic {magic!r}")
        for _ in range(count):
            raw = _read_field(fh, path)
            try:
                key = raw.decode()
            except UnicodeDecodeError as e:
                raise SnapshotFormatError(f"{path}: corrupt key: {e}") from e
            yield key, _read_field(fh, path)


def _read_field(fh: BinaryIO, path: Path) -> bytes:
    raw = fh.read(_LENGTH.size)
    if len(raw) != _LENGTH.size:
        raise SnapshotFormatError(f"{path}: truncated record length")
    (size,) = _LENGTH.unpack(raw)
    data = fh.read(size)
    if len(data) != size:
        raise SnapshotFormatError(f"{path}: record truncated at {len(data)} of {size} bytes")
    return data


class KvStore:
    """Single-writer hash table persisted by an HG, PB or fork-style snapshotter."""

    def __init__(
        self,
        mode: str = "hg",
        sink: Optional[KvDumpSink] = None,
        value_max: int = config.KV_VALUE_MAX,
        auto_gc: bool = True,
    ):
        if mode not in KV_MODES:
            raise ConfigError(f"unknown kv mode {mode!r}; choose from {', '.join(KV_MODES)}")
        self.mode = mode
        self.label = mode if mode != "fork" or FORK_AVAILABLE else "ns-fallback"
        self.sink = sink or KvDumpSink()
        if mode == "fork" and FORK_AVAILABLE and self.sink.directory is None:
            raise ConfigError("fork-style dumps are written by a child process and need a dump directory")
        self.value_max = value_max
        self.auto_gc = auto_gc
        self._index: dict[str, Slot] = {}
        self._keys: list[str] = []
        self._lock = threading.Lock()
        self._pu = 0
        self._worker = SnapshotWorker(name=f"kv-{mode}-snapshotter")
        self._current: Optional[SnapshotHandle] = None
        self._checkpoint_id = 0
        self._last_dump_id: Optional[int] = None
        self._force_full = False
        self._child_pid: Optional[int] = None
        self.changes = 0
        self.stats = KvStats()

    # -- accounting ---------------------------------------------------------

    def _account(self, before: int, after: int) -> None:
        self.stats.live_bytes += after - before
        if self.stats.live_bytes > self.stats.high_water:
            self.stats.high_water = self.stats.live_bytes

    def __len__(self) -> int:
        return len(self._keys)

    def keys(self) -> list[str]:
        return list(self._keys)

    @property
    def dataset_bytes(self) -> int:
        """Bytes of the latest version of every key."""
        return sum(len(v) for v in (self.get(k) for k in self._keys) if v is not None)

    # -- client side ----------------------------------------------------------

    def put(self, key: str, value: bytes) -> None:
        if not key:
            raise ConfigError("key must be non-empty")
        if len(value) > self.value_max:
            raise ConfigError(f"value of {len(value)} bytes exceeds {self.value_max}")
        with self._lock:
            slot = self._index.get(key)
            if slot is None:
                slot = Slot()
                self._index[key] = slot
                self._keys.append(key)
                self.stats.keys += 1
            before = slot.nbytes()
            if self.mode == "hg":
                pu = self._pu
                slot.versions[pu] = value
                slot.bits[pu] = 1
                slot.read_from = pu
            elif self.mode == "pb":
                pu = self._pu
                slot.versions[pu] = value
                slot.flag = pu + 1
            else:
                slot.versions[0] = value
            self._account(before, slot.nbytes())
            self.changes += 1

    def get(self, key: str) -> Optional[bytes]:
        slot = self._index.get(key)
        if slot is None:
            return None
        if self.mode == "hg":
            return slot.versions[slot.read_from]
        if self.mode == "pb":
            if slot.flag == 0:
                a, b = slot.versions
                return a if a is not None else b
            return slot.versions[slot.flag - 1]
        return slot.versions[0]

    def load(self, records: Iterable[tuple[str, bytes]]) -> int:
        n = 0
        for key, value in records:
            self.put(key, value)
            n += 1
        logger.info("kv-%s: loaded %d records, %d live bytes", self.mode, n, self.stats.live_bytes)
        return n

    # -- snapshotter side -----------------------------------------------------

    def previous_snapshot_done(self) -> bool:
        if self._current is None:
            return True
        if self._child_pid is not None:
            self._reap(block=False)
        return self._current.done()

    def snapshot(self, force: bool = False) -> Optional[SnapshotHandle]:
        """Trigger a dump; skipped (``None``) with no changes or a dump still running."""
        if not self.previous_snapshot_done():
            self.stats.skipped_snapshots += 1
            return None
        if self.changes == 0 and not force:
            self.stats.skipped_snapshots += 1
            logger.debug("kv-%s: no changes since the last dump", self.mode)
            return None
        self._checkpoint_id += 1
        handle = SnapshotHandle(self._checkpoint_id)
        started = time.perf_counter()
        if self.mode == "fork" and FORK_AVAILABLE:
            self._fork_dump(handle)
        else:
            with self._lock:
                frozen = len(self._keys)
                self.changes = 0
                if self.mode == "fork":
                    job = self._ns_job(handle.checkpoint_id, self._copy_latest(frozen))
                elif self._force_full:
                    for slot in self._index.values():
                        slot.bits[1 - self._pu] = 0
                    job = self._full_job(handle.checkpoint_id, self._copy_latest(frozen))
                else:
                    self._pu ^= 1
                    job = self._hg_job if self.mode == "hg" else self._pb_job
                    job = _bind(job, handle.checkpoint_id, frozen, 1 - self._pu)
            self._worker.submit(job, handle)
        handle.taken_seconds = time.perf_counter() - started
        self.stats.max_stall = max(self.stats.max_stall, handle.taken_seconds)
        self.stats.snapshots += 1
        self._current = handle
        return handle

    def _copy_latest(self, frozen: int) -> list[tuple[str, bytes]]:
        keys = self._keys[:frozen]
        return [(k, self.get(k)) for k in keys]

    def _write_dump(self, checkpoint_id: int, records: Iterable[tuple[str, bytes]], count: int):
        self.sink.open(checkpoint_id, count)
        try:
            for key, value in records:
                self.sink.write(key, value)
        except BaseException:
            self.sink.abort()
            raise
        return self.sink.close()

    def _ns_job(self, checkpoint_id: int, records: list[tuple[str, bytes]]):
        return lambda: self._write_dump(checkpoint_id, records, len(records))

    def _full_job(self, checkpoint_id: int, records: list[tuple[str, bytes]]):
        def job():
            result = self._write_dump(checkpoint_id, records, len(records))
            self._last_dump_id = checkpoint_id
            self._force_full = False
            return result

        return job

    def _hg_job(self, checkpoint_id: int, frozen: int, pd: int):
        """Dump dirty pD versions; clean keys are streamed from the previous dump.

        Keys are only ever appended, so the previous dump lists a prefix of
        ``self._keys`` in the same order and can be walked in lockstep.
        """
        cleared: list[Slot] = []
        previous = self.sink.iter(self._last_dump_id) if self._last_dump_id is not None else None

        def records():
            for key in self._keys[:frozen]:
                record = next(previous, None) if previous is not None else None
                slot = self._index[key]
                if slot.bits[pd]:
                    value = slot.versions[pd]
                    cleared.append(slot)
                elif record is not None and record[0] == key:
                    value = record[1]
                else:
                    raise SnapshotError(f"clean key {key!r} missing from dump {self._last_dump_id}")
                yield key, value

        try:
            result = self._write_dump(checkpoint_id, records(), frozen)
        except BaseException:
            logger.warning("kv-hg: dump %d failed; next dump is a full copy", checkpoint_id)
            self._force_full = True
            raise
        finally:
            if previous is not None:
                previous.close()
        for slot in cleared:
            slot.bits[pd] = 0
        self._last_dump_id = checkpoint_id
        if self.auto_gc:
            self.gc()
        return result

    def _pb_job(self, checkpoint_id: int, frozen: int, pd: int):
        self._write_to_online(pd)

        def records():
            for key in self._keys[:frozen]:
                yield key, self._index[key].versions[pd]

        result = self._write_dump(checkpoint_id, records(), frozen)
        if self.auto_gc:
            self.gc()
        return result

    def _write_to_online(self, pd: int) -> int:
        """Share the pD version into pU for keys whose latest value sits on pD."""
        pu = 1 - pd
        shared = 0
        for key in list(self._keys):
            slot = self._index[key]
            if slot.flag != pd + 1:
                continue
            with self._lock:
                if slot.flag == pd + 1:
                    before = slot.nbytes()
                    slot.versions[pu] = slot.versions[pd]
                    slot.flag = 0
                    self._account(before, slot.nbytes())
                    shared += 1
        return shared

    def _fork_dump(self, handle: SnapshotHandle) -> None:
        with self._lock:
            frozen = len(self._keys)
            self.changes = 0
        pid = os.fork()
        if pid == 0:
            code = 1
            try:
                self._write_dump(handle.checkpoint_id, self._copy_latest(frozen), frozen)
                code = 0
            finally:
                os._exit(code)
        self._child_pid = pid
        handle.access_started = time.perf_counter()

    def _reap(self, block: bool) -> None:
        pid, status = os.waitpid(self._child_pid, 0 if block else os.WNOHANG)
        if pid == 0:
            return
        self._child_pid = None
        code = os.waitstatus_to_exitcode(status)
        handle = self._current
        if code != 0:
            handle._finish(error=SnapshotError(f"dump child exited with status {code}"))
        elif self.sink.directory is not None:
            path = self.sink.path_for(handle.checkpoint_id)
            self.sink.paths[handle.checkpoint_id] = path
            handle._finish(result=path)
        else:
            handle._finish(error=SnapshotError("fork-style dumps need a file-backed sink"))

    def wait(self, timeout: Optional[float] = None):
        """Wait for the running dump, if any; returns its result."""
        if self._current is None:
            return None
        if self._child_pid is not None:
            self._reap(block=True)
        return self._current.wait(timeout)

    def gc(self) -> GcLedger:
        """Free every version that has been dumped and is no longer the latest."""
        if self._current is not None and not self._current.done() and threading.current_thread() is not self._worker._thread:
            raise SnapshotInProgressError("gc runs after a dump completes")
        delta = GcLedger()
        if self.mode == "fork":
            return delta
        keys = list(self._keys)
        for start in range(0, len(keys), 1024):
            with self._lock:
                for key in keys[start:start + 1024]:
                    slot = self._index[key]
                    if self.mode == "hg":
                        stale = 1 - slot.read_from
                    elif slot.flag:
                        stale = 2 - slot.flag
                    else:
                        continue
                    value = slot.versions[stale]
                    if value is None or value is slot.versions[1 - stale]:
                        continue
                    before = slot.nbytes()
                    slot.versions[stale] = None
                    slot.bits[stale] = 0 if self.mode == "hg" else slot.bits[stale]
                    self._account(before, slot.nbytes())
                    delta.reclaimed_versions += 1
                    delta.bytes_reclaimed += len(value)
        delta.high_water = self.stats.high_water
        self.stats.gc = self.stats.gc + delta
        logger.debug("kv-%s: gc reclaimed %d versions (%d bytes)", self.mode, delta.reclaimed_versions, delta.bytes_reclaimed)
        return delta

    def close(self) -> None:
        try:
            self.wait()
        finally:
            self._worker.stop()


def _bind(job, *args):
    return lambda: job(*args)


@dataclass
class KvRunResult:
    mode: str
    label: str
    operations: int
    updates: int
    elapsed: float
    avg_latency: float
    max_latency: float
    max_stall: float
    snapshots: int
    live_bytes: int
    high_water: int
    dataset_bytes: int
    gc: GcLedger
    trigger_positions: dict[int, int] = field(default_factory=dict)  # dump id -> ops applied before it

    @property
    def throughput(self) -> float:
        return self.operations / (self.elapsed * 1000.0) if self.elapsed > 0 else 0.0


def run_kv_workload(store: KvStore, operations, policy: Optional[SavePolicy] = None) -> KvRunResult:
    """Replay ``operations`` on one client thread, dumping per ``policy``."""
    policy = policy or SavePolicy()
    latencies_total = 0.0
    max_latency = 0.0
    updates = 0
    positions: dict[int, int] = {}
    last_save = time.perf_counter()
    started = last_save
    for position, (op, key, value) in enumerate(operations):
        t0 = time.perf_counter()
        if policy.due(t0 - last_save, store.changes):
            handle = store.snapshot()
            if handle is not None:
                positions[handle.checkpoint_id] = position
                last_save = t0
        if op == "update":
            store.put(key, value)
            updates += 1
        else:
            store.get(key)
        latency = time.perf_counter() - t0
        latencies_total += latency
        max_latency = max(max_latency, latency)
    elapsed = time.perf_counter() - started
    store.wait()
    n = len(operations)
    return KvRunResult(
        mode=store.mode,
        label=store.label,
        operations=n,
        updates=updates,
        elapsed=elapsed,
        avg_latency=latencies_total / n if n else 0.0,
        max_latency=max_latency,
        max_stall=store.stats.max_stall,
        snapshots=store.stats.snapshots,
        live_bytes=store.stats.live_bytes,
        high_water=store.stats.high_water,
        dataset_bytes=store.dataset_bytes,
        gc=store.stats.gc,
        trigger_positions=positions,
    )


def replay_operations(records: Iterable[tuple[str, bytes]], operations, upto: Optional[int] = None) -> dict[str, bytes]:
    """Contents of the store after the load ``records`` and the first ``upto`` operations."""
    state = dict(records)
    for op, key, value in operations[:upto]:
        if op == "update":
            state[key] = value
    return state


def verify_dumps(
    sink: KvDumpSink,
    records: Iterable[tuple[str, bytes]],
    operations,
    positions: dict[int, int],
) -> list[int]:
    """Check each dump against the op log replayed up to its trigger; returns the ids that disagree.

    ``positions`` maps a dump id to the number of operations applied before
    it was triggered, as in ``KvRunResult.trigger_positions``.
    """
    state = dict(records)
    applied = 0
    mismatched = []
    for checkpoint_id, position in sorted(positions.items(), key=lambda item: (item[1], item[0])):
        for op, key, value in operations[applied:position]:
            if op == "update":
                state[key] = value
        applied = position
        try:
            dumped = dict(sink.iter(checkpoint_id))
        except (OSError, SnapshotError, SnapshotFormatError) as e:
            logger.error("kv dump %d unreadable: %s", checkpoint_id, e)
            mismatched.append(checkpoint_id)
            continue
        if dumped != state:
            logger.error("kv dump %d does not match the op log at operation %d", checkpoint_id, position)
            mismatched.append(checkpoint_id)
    return mismatched
