"""Synthetic workloads: Zipfian update traces, the tick driver and mixed
read/update streams for the transactional and key-value layers."""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from . import config
from .core import SnapshotAlgorithm, SnapshotHandle
from .errors import ConfigError, MemoryBudgetError, SnapshotFormatError, TraceError
from .metrics import CheckpointRecord, MetricsRecorder, PhaseMarker, TickMetrics
from .virtual import Transaction

logger = logging.getLogger(__name__)

_TRACE_HEADER = struct.Struct("<8sQQQQ")
TRACE_RECORD = np.dtype([("index", "<u4"), ("value", "<u4")])


class ZipfianGenerator:
    """Ranks in [1, n] with P(k) proportional to k**-alpha.

    Rejection-inversion sampling; every draw is vectorized so a million
    ranks cost a handful of numpy passes.
    """

    def __init__(self, n: int, alpha: float, rng: np.random.Generator):
        if n < 1:
            raise ConfigError(f"zipf support must be >= 1, got {n}")
        if alpha <= 0:
            raise ConfigError(f"zipf exponent must be > 0, got {alpha}")
        self.n = n
        self.alpha = float(alpha)
        self.rng = rng
        self._h_x1 = self._h_integral(1.5) - 1.0
        self._h_n = self._h_integral(n + 0.5)
        self._s = 2.0 - self._h_integral_inverse(self._h_integral(2.5) - self._h(2.0))

    @staticmethod
    def _helper1(x):
        # log1p(x) / x, continuous at 0
        x = np.asarray(x, dtype=float)
        small = np.abs(x) < 1e-8
        safe = np.where(small, 1.0, x)
        return np.where(small, 1.0 - x / 2.0 + x * x / 3.0, np.log1p(safe) / safe)

    @staticmethod
    def _helper2(x):
        # expm1(x) / x, continuous at 0
        x = np.asarray(x, dtype=float)
        small = np.abs(x) < 1e-8
        safe = np.where(small, 1.0, x)
        return np.where(small, 1.0 + x / 2.0 + x * x / 6.0, np.expm1(safe) / safe)

    def _h(self, x):
        return np.exp(-self.alpha * np.log(x))

    def _h_integral(self, x):
        log_x = np.log(x)
        return self._helper2((1.0 - self.alpha) * log_x) * log_x

    def _h_integral_inverse(self, x):
        t = np.maximum(x * (1.0 - self.alpha), -1.0)
        return np.exp(self._helper1(t) * x)

    def sample(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.int64)
        filled = 0
        while filled < size:
            want = size - filled
            u = self._h_n + self.rng.random(want) * (self._h_x1 - self._h_n)
            x = self._h_integral_inverse(u)
            k = np.clip(np.floor(x + 0.5), 1, self.n)
            accept = (k - x <= self._s) | (u >= self._h_integral(k + 0.5) - self._h(k))
            ranks = k[accept].astype(np.int64)
            out[filled:filled + len(ranks)] = ranks
            filled += len(ranks)
        return out


@dataclass
class UpdateTrace:
    """A pre-generated stream of (page_index, value) updates."""

    indices: np.ndarray
    values: np.ndarray
    page_count: int
    alpha: float = config.ZIPF_ALPHA
    seed: int = 0

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __iter__(self) -> Iterator[tuple[int, int]]:
        return zip(self.indices.tolist(), self.values.tolist())

    @property
    def nbytes(self) -> int:
        return int(self.indices.nbytes + self.values.nbytes)

    def save(self, path: Union[str, Path]) -> Path:
        return save_trace(self, path)


def generate_trace(
    page_count: int,
    entry_count: int,
    alpha: float = config.ZIPF_ALPHA,
    seed: int = 42,
    memory_budget: int = config.TRACE_MEMORY_BUDGET,
) -> UpdateTrace:
    """Zipfian page indices over a seeded rank permutation; values are sequence numbers + 1."""
    if entry_count < 1:
        raise TraceError(f"entry_count must be >= 1, got {entry_count}")
    if page_count < 1 or page_count > np.iinfo(np.uint32).max:
        raise TraceError(f"page_count {page_count} outside the 32-bit index range")
    needed = entry_count * TRACE_RECORD.itemsize
    if needed > memory_budget:
        raise MemoryBudgetError(f"trace needs {needed} bytes, budget is {memory_budget}")
    rng = np.random.default_rng(seed)
    hot_order = rng.permutation(page_count)
    ranks = ZipfianGenerator(page_count, alpha, rng).sample(entry_count)
    indices = hot_order[ranks - 1].astype(np.uint32)
    values = np.arange(1, entry_count + 1, dtype=np.uint32)
    return UpdateTrace(indices, values, page_count, alpha, seed)


def save_trace(trace: UpdateTrace, path: Union[str, Path]) -> Path:
    path = Path(path)
    records = np.empty(len(trace), dtype=TRACE_RECORD)
    records["index"] = trace.indices
    records["value"] = trace.values
    header = _TRACE_HEADER.pack(
        config.TRACE_MAGIC, trace.page_count, len(trace), int(round(trace.alpha * 1000)), trace.seed
    )
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(records.tobytes())
    except OSError as e:
        raise OSError(f"could not write trace {path}: {e}") from e
    return path


def load_trace(path: Union[str, Path]) -> UpdateTrace:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"could not read trace {path}: {e}") from e
    if len(data) < _TRACE_HEADER.size:
        raise SnapshotFormatError(f"{path}: shorter than the trace header")
    magic, page_count, entry_count, alpha_milli, seed = _TRACE_HEADER.unpack_from(data)
    if magic != config.TRACE_MAGIC:
        raise SnapshotFormatError(f"{path}: bad trace magic {magic!r}")
    payload = memoryview(data)[_TRACE_HEADER.size:]
    if len(payload) != entry_count * TRACE_RECORD.itemsize:
        raise SnapshotFormatError(f"{path}: expected {entry_count} records")
    records = np.frombuffer(payload, dtype=TRACE_RECORD)
    return UpdateTrace(
        records["index"].copy(), records["value"].copy(), page_count, alpha_milli / 1000.0, seed
    )


@dataclass
class TickSchedule:
    tick_length: float = config.TICK_MS / 1000.0  # seconds
    uf: int = 16_000
    checkpoint_interval: float = config.CHECKPOINT_INTERVAL_S
    checkpoint_count: int = config.CHECKPOINT_COUNT

    def __post_init__(self) -> None:
        if self.tick_length <= 0 or self.checkpoint_interval <= 0:
            raise ConfigError("tick length and checkpoint interval must be positive")
        if self.uf < 0 or self.checkpoint_count < 0:
            raise ConfigError("uf and checkpoint_count must not be negative")

    @property
    def ticks_per_checkpoint(self) -> int:
        return max(1, int(round(self.checkpoint_interval / self.tick_length)))

    def planned_ticks(self) -> int:
        """Ticks needed to fire every checkpoint plus one trailing period."""
        return (self.checkpoint_count + 1) * self.ticks_per_checkpoint

    def trace_entries(self, slack: float = 1.5) -> int:
        return max(1, int(self.planned_ticks() * self.uf * slack))


@dataclass
class TickRun:
    ticks: list[TickMetrics] = field(default_factory=list)
    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    handles: list[SnapshotHandle] = field(default_factory=list)
    trigger_positions: dict[int, int] = field(default_factory=dict)
    position: int = 0

    @property
    def updates_applied(self) -> int:
        return sum(t.updates_applied for t in self.ticks)


def iter_ticks(
    algo: SnapshotAlgorithm,
    trace: UpdateTrace,
    schedule: TickSchedule,
    run: Optional[TickRun] = None,
    sleep: bool = True,
) -> Iterator[TickMetrics]:
    """Drive the client tick by tick, yielding one record per tick.

    Each tick applies ``uf`` updates (the update stage, whose duration is the
    tick latency) then idles to the tick boundary. A trigger fires inside the
    update stage of every ``ticks_per_checkpoint``-th tick.
    """
    run = run if run is not None else TickRun()
    indices, values = trace.indices, trace.values
    total = len(trace)
    uf = schedule.uf
    every = schedule.ticks_per_checkpoint
    write = algo.write
    fired = completed = 0
    pending: Optional[SnapshotHandle] = None
    tick = 0
    next_start = time.perf_counter()
    while completed < schedule.checkpoint_count:
        if pending is not None and pending.done():
            run.checkpoints.append(CheckpointRecord.from_handle(pending, run.trigger_positions[pending.checkpoint_id]))
            pending.wait(0)
            pending = None
            completed += 1
            if completed >= schedule.checkpoint_count:
                break
        if run.position + uf > total:
            if fired >= schedule.checkpoint_count and pending is not None:
                logger.warning("trace exhausted; waiting for checkpoint %d", pending.checkpoint_id)
                pending.wait()
                continue
            raise TraceError(f"trace exhausted after {run.position} updates at tick {tick}")
        marker = PhaseMarker.ACCESS if pending is not None else PhaseMarker.NONE
        checkpoint_id = None
        start = time.perf_counter()
        if tick > 0 and tick % every == 0 and fired < schedule.checkpoint_count:
            handle = algo.trigger()
            if handle is not None:
                pending = handle
                fired += 1
                marker = PhaseMarker.TAKEN
                checkpoint_id = handle.checkpoint_id
                run.trigger_positions[handle.checkpoint_id] = run.position
                run.handles.append(handle)
        lo, hi = run.position, run.position + uf
        for index, value in zip(indices[lo:hi].tolist(), values[lo:hi].tolist()):
            write(index, value)
        latency = time.perf_counter() - start
        overrun = latency > schedule.tick_length
        if overrun:
            logger.debug("tick %d overran: %.3f ms", tick, latency * 1e3)
        metrics = TickMetrics(tick, latency, uf, overrun, marker, lo, checkpoint_id)
        run.position = hi
        run.ticks.append(metrics)
        yield metrics
        tick += 1
        next_start += schedule.tick_length
        idle = next_start - time.perf_counter()
        if idle > 0:
            if sleep:
                time.sleep(idle)
        else:
            # back-pressure: the next tick starts immediately
            next_start = time.perf_counter()


def run_ticks(
    algo: SnapshotAlgorithm,
    trace: UpdateTrace,
    schedule: TickSchedule,
    recorder: Optional[MetricsRecorder] = None,
    sleep: bool = True,
) -> TickRun:
    """Run ``iter_ticks`` to completion and collect the result."""
    run = TickRun()
    for metrics in iter_ticks(algo, trace, schedule, run, sleep):
        if recorder is not None:
            recorder.record_tick(metrics)
    if recorder is not None:
        for record in run.checkpoints:
            recorder.record_checkpoint(record)
    logger.info(
        "%s: %d ticks, %d updates, %d checkpoints", algo.name, len(run.ticks), run.position, len(run.checkpoints)
    )
    return run


@dataclass
class FullSpeedResult:
    updates: int
    elapsed: float
    checkpoints: int

    @property
    def throughput(self) -> float:
        """Updates per millisecond."""
        return self.updates / (self.elapsed * 1000.0) if self.elapsed > 0 else 0.0


def run_full_speed(
    algo: SnapshotAlgorithm,
    trace: UpdateTrace,
    duration: float,
    checkpoint_interval: Optional[float] = config.CHECKPOINT_INTERVAL_S,
    batch: int = 4096,
) -> FullSpeedResult:
    """Apply updates without idling for ``duration`` seconds, triggering on schedule.

    The trace is replayed cyclically when shorter than the run.
    """
    if duration <= 0:
        return FullSpeedResult(0, 0.0, 0)
    indices, values = trace.indices, trace.values
    total = len(trace)
    write = algo.write
    updates = position = checkpoints = 0
    started = time.perf_counter()
    next_trigger = started + checkpoint_interval if checkpoint_interval else None
    deadline = started + duration
    while True:
        now = time.perf_counter()
        if now >= deadline:
            break
        if next_trigger is not None and now >= next_trigger:
            if algo.trigger() is not None:
                checkpoints += 1
            next_trigger += checkpoint_interval
        hi = min(position + batch, total)
        for index, value in zip(indices[position:hi].tolist(), values[position:hi].tolist()):
            write(index, value)
        updates += hi - position
        position = 0 if hi >= total else hi
    elapsed = time.perf_counter() - started
    algo.wait_idle()
    return FullSpeedResult(updates, elapsed, checkpoints)


def value_bytes(sequence: int, size: int = config.KV_VALUE_SIZE) -> bytes:
    """Deterministic value payload of ``size`` bytes for a sequence number."""
    stamp = sequence.to_bytes(8, "little")
    return (stamp * (size // 8 + 1))[:size]


@dataclass
class MixedWorkload:
    """YCSB-style read/update mix over Zipf-distributed records."""

    record_count: int = 100_000
    operation_count: int = 100_000
    update_proportion: float = 0.1
    alpha: float = config.ZIPF_ALPHA
    client_threads: int = 1
    seed: int = 42
    value_size: int = config.KV_VALUE_SIZE

    def __post_init__(self) -> None:
        if self.record_count < 1 or self.operation_count < 0:
            raise ConfigError("record_count must be >= 1 and operation_count >= 0")
        if not 0.0 <= self.update_proportion <= 1.0:
            raise ConfigError(f"update proportion must be in [0, 1], got {self.update_proportion}")
        if not 1 <= self.client_threads <= config.MAX_CLIENT_THREADS:
            raise ConfigError(f"client threads must be in [1, {config.MAX_CLIENT_THREADS}]")

    @staticmethod
    def key(record: int) -> str:
        return f"user{record}"

    def _records(self, rng: np.random.Generator, size: int, n: int) -> np.ndarray:
        hot_order = rng.permutation(n)
        return hot_order[ZipfianGenerator(n, self.alpha, rng).sample(size) - 1]

    def load_records(self) -> Iterator[tuple[str, bytes]]:
        """Load phase: every record once, in key order."""
        for record in range(self.record_count):
            yield self.key(record), value_bytes(record, self.value_size)

    def operations(self) -> list[tuple[str, str, Optional[bytes]]]:
        """``("read", key, None)`` / ``("update", key, value)`` operations.

        The update count is exactly ``round(update_proportion * operation_count)``.
        """
        rng = np.random.default_rng(self.seed)
        n_ops = self.operation_count
        is_update = np.zeros(n_ops, dtype=bool)
        is_update[: int(round(self.update_proportion * n_ops))] = True
        rng.shuffle(is_update)
        records = self._records(rng, n_ops, self.record_count)
        ops: list[tuple[str, str, Optional[bytes]]] = []
        for seq, (record, update) in enumerate(zip(records.tolist(), is_update.tolist())):
            key = self.key(record)
            if update:
                ops.append(("update", key, value_bytes(self.record_count + seq, self.value_size)))
            else:
                ops.append(("read", key, None))
        return ops

    def transactions(
        self,
        page_count: Optional[int] = None,
        max_pages: int = 4,
        abort_fraction: float = 0.0,
    ) -> list[Transaction]:
        """One-shot transactions writing 1..max_pages distinct pages each."""
        page_count = page_count or self.record_count
        rng = np.random.default_rng(self.seed)
        sizes = rng.integers(1, max_pages + 1, self.operation_count)
        pool = self._records(rng, int(sizes.sum()), page_count).tolist()
        aborts = rng.random(self.operation_count) < abort_fraction
        txns = []
        cursor = 0
        sequence = 0
        for size, abort in zip(sizes.tolist(), aborts.tolist()):
            pages = list(dict.fromkeys(pool[cursor:cursor + size]))
            cursor += size
            writes = []
            for page in pages:
                sequence += 1
                writes.append((int(page), sequence))
            txns.append(Transaction(writes, abort_after_write=bool(abort)))
        return txns
