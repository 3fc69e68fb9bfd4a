"""Per-tick latency records, run summaries and CSV export."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence, Union

import numpy as np

from .core import AlgorithmCounters, SnapshotHandle
from .errors import ConfigError, SnapkitError

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("tick", "latency_us", "phase", "updates", "overrun")
CDF_COLUMNS = ("latency_us", "fraction")


class PhaseMarker(str, Enum):
    NONE = "none"
    TAKEN = "taken_phase"
    ACCESS = "access_phase"


@dataclass
class TickMetrics:
    tick_index: int
    latency: float  # seconds, update stage only
    updates_applied: int
    overrun: bool = False
    phase_marker: PhaseMarker = PhaseMarker.NONE
    trace_position: int = 0  # updates consumed before this tick
    checkpoint_id: Optional[int] = None  # set on the tick that fired a trigger


@dataclass
class CheckpointRecord:
    """Snapshotter-side timings of one checkpoint."""

    checkpoint_id: int
    taken_seconds: float
    access_seconds: float
    taken_ops: int
    trace_position: Optional[int] = None

    @classmethod
    def from_handle(cls, handle: SnapshotHandle, trace_position: Optional[int] = None) -> "CheckpointRecord":
        return cls(handle.checkpoint_id, handle.taken_seconds, handle.access_seconds, handle.taken_ops, trace_position)


class MetricsRecorder:
    """Bounded per-producer buffers: the client appends ticks, the snapshotter phases."""

    def __init__(self, capacity: int = 1_000_000):
        self.ticks: deque[TickMetrics] = deque(maxlen=capacity)
        self.checkpoints: deque[CheckpointRecord] = deque(maxlen=capacity)

    def record_tick(self, tick: TickMetrics) -> None:
        self.ticks.append(tick)

    def record_checkpoint(self, record: CheckpointRecord) -> None:
        self.checkpoints.append(record)

    def merged(self) -> tuple[list[TickMetrics], list[CheckpointRecord]]:
        ticks = sorted(self.ticks, key=lambda t: t.tick_index)
        checkpoints = sorted(self.checkpoints, key=lambda c: c.checkpoint_id)
        return ticks, checkpoints


@dataclass
class RunReport:
    algorithm: str
    avg_latency: float
    max_latency: float
    median_latency: float
    p90_latency: float
    p99_latency: float
    latency_trace: list[float]
    ticks: list[TickMetrics] = field(default_factory=list)
    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    max_throughput: Optional[float] = None  # updates (or transactions) per ms
    page_copies: int = 0
    piggyback_copies: int = 0
    physical_writes: int = 0
    logical_writes: int = 0
    peak_page_bytes: int = 0
    dataset_bytes: int = 0
    overruns: int = 0
    os_shared: bool = False
    label: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def checkpoint_overhead(self) -> list[float]:
        return [c.access_seconds for c in self.checkpoints]

    @property
    def spike_ratio(self) -> float:
        if self.median_latency <= 0:
            return float("inf") if self.max_latency > 0 else 1.0
        return self.max_latency / self.median_latency

    @property
    def memory_ratio(self) -> float:
        return self.peak_page_bytes / self.dataset_bytes if self.dataset_bytes else 0.0

    @property
    def taken_phase_ticks(self) -> int:
        return sum(1 for t in self.ticks if t.phase_marker is PhaseMarker.TAKEN)

    def summary_rows(self) -> list[tuple[str, Any]]:
        rows: list[tuple[str, Any]] = [
            ("algorithm", self.algorithm),
            ("label", self.label or self.algorithm),
            ("ticks", len(self.ticks)),
            ("avg_latency_us", _us(self.avg_latency)),
            ("max_latency_us", _us(self.max_latency)),
            ("median_latency_us", _us(self.median_latency)),
            ("p90_latency_us", _us(self.p90_latency)),
            ("p99_latency_us", _us(self.p99_latency)),
            ("spike_ratio", round(self.spike_ratio, 3) if np.isfinite(self.spike_ratio) else "inf"),
            ("overruns", self.overruns),
            ("max_throughput_per_ms", "" if self.max_throughput is None else round(self.max_throughput, 3)),
            ("checkpoints", len(self.checkpoints)),
            ("avg_checkpoint_overhead_us", _us(float(np.mean(self.checkpoint_overhead))) if self.checkpoints else 0),
            ("page_copies", self.page_copies),
            ("piggyback_copies", self.piggyback_copies),
            ("physical_writes", self.physical_writes),
            ("logical_writes", self.logical_writes),
            ("peak_page_bytes", self.peak_page_bytes),
            ("dataset_bytes", self.dataset_bytes),
            ("memory_ratio", round(self.memory_ratio, 4)),
            ("os_shared_memory", self.os_shared),
        ]
        rows.extend(sorted(self.extra.items()))
        return rows


def _us(seconds: float) -> int:
    return int(round(seconds * 1e6))


def percentiles(latencies: Sequence[float], points: Iterable[float] = (50, 90, 99)) -> dict[float, float]:
    if not len(latencies):
        raise SnapkitError("no latencies to summarize")
    values = np.percentile(np.asarray(latencies, dtype=float), list(points))
    return dict(zip(points, (float(v) for v in values)))


def summarize(
    ticks: Iterable[TickMetrics],
    counters: Optional[AlgorithmCounters] = None,
    checkpoints: Iterable[CheckpointRecord] = (),
    *,
    algorithm: str = "",
    peak_page_bytes: int = 0,
    dataset_bytes: int = 0,
    max_throughput: Optional[float] = None,
    os_shared: bool = False,
    label: str = "",
) -> RunReport:
    """Aggregate a tick stream and the algorithm counters into a report."""
    ticks = list(ticks)
    if not ticks:
        raise SnapkitError("cannot summarize an empty tick stream")
    latencies = np.array([t.latency for t in ticks], dtype=float)
    pct = percentiles(latencies)
    counters = counters or AlgorithmCounters()
    report = RunReport(
        algorithm=algorithm,
        avg_latency=float(latencies.mean()),
        max_latency=float(latencies.max()),
        median_latency=pct[50],
        p90_latency=pct[90],
        p99_latency=pct[99],
        latency_trace=latencies.tolist(),
        ticks=ticks,
        checkpoints=list(checkpoints),
        max_throughput=max_throughput,
        page_copies=counters.sync_page_copies,
        piggyback_copies=counters.async_page_copies,
        physical_writes=counters.physical_writes,
        logical_writes=counters.logical_writes,
        peak_page_bytes=peak_page_bytes,
        dataset_bytes=dataset_bytes,
        overruns=sum(1 for t in ticks if t.overrun),
        os_shared=os_shared,
        label=label,
    )
    logger.info(
        "%s: %d ticks, avg %.1f us, max %.1f us, %d checkpoints",
        algorithm, len(ticks), report.avg_latency * 1e6, report.max_latency * 1e6, len(report.checkpoints),
    )
    return report


def latency_cdf(latencies: Sequence[float]) -> list[tuple[int, float]]:
    """(latency_us, cumulative fraction) at every distinct latency."""
    if not len(latencies):
        return []
    values = np.sort(np.asarray([_us(v) for v in latencies]))
    distinct, counts = np.unique(values, return_counts=True)
    fractions = np.cumsum(counts) / len(values)
    return [(int(v), round(float(f), 6)) for v, f in zip(distinct, fractions)]


def parse_window(text: Optional[str]) -> Optional[tuple[int, int]]:
    """Parse ``"A:B"`` into a half-open tick window."""
    if not text:
        return None
    try:
        start, end = (int(part) for part in text.split(":", 1))
    except ValueError:
        raise ConfigError(f"trace window must look like START:END, got {text!r}") from None
    if start < 0 or end <= start:
        raise ConfigError(f"empty trace window {text!r}")
    return start, end


def export_csv(
    report: RunReport,
    path: Union[str, Path],
    window: Optional[tuple[int, int]] = None,
) -> dict[str, Path]:
    """Write trace.csv, summary.csv and latency_cdf.csv into directory ``path``."""
    if not str(path):
        raise ConfigError("export path must not be empty")
    directory = Path(path)
    paths = {
        "trace": directory / "trace.csv",
        "summary": directory / "summary.csv",
        "cdf": directory / "latency_cdf.csv",
    }
    ticks = report.ticks
    if window is not None:
        ticks = [t for t in ticks if window[0] <= t.tick_index < window[1]]
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with open(paths["trace"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for t in ticks:
                writer.writerow((t.tick_index, _us(t.latency), t.phase_marker.value, t.updates_applied, int(t.overrun)))
        with open(paths["summary"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("metric", "value"))
            writer.writerows(report.summary_rows())
        with open(paths["cdf"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CDF_COLUMNS)
            writer.writerows(latency_cdf(report.latency_trace))
    except OSError as e:
        raise OSError(f"could not write metrics under {directory}: {e}") from e
    return paths


def write_matrix_csv(rows: Sequence[dict[str, Any]], path: Union[str, Path]) -> Path:
    """One row per sweep cell; columns are the union of row keys in first-seen order."""
    path = Path(path)
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, restval="")
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise OSError(f"could not write matrix {path}: {e}") from e
    return path
