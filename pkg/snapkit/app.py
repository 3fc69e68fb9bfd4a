"""Benchmark runner: command-line entry point and the controller behind it."""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__, config
from .algorithms import ALGORITHMS, FORK_AVAILABLE, create_algorithm, describe_algorithms, memory_multiplier
from .core import PageImage, create_store, oracle_replay, pages_for_megabytes
from .errors import ConfigError, MemoryBudgetError, SnapkitError, UnsupportedPlatformError
from .kvstore import KvDumpSink, KvStore, SavePolicy, replay_operations, run_kv_workload, verify_dumps
from .metrics import RunReport, export_csv, parse_window, summarize, write_matrix_csv
from .persist import FileSink, NullSink, verify_file
from .settings import BenchConfig, build_config, make_run_dir, output_root
from .virtual import VIRTUAL_ENGINES, TransactionExecutor, commit_log_replay, create_engine
from .workload import MixedWorkload, TickSchedule, generate_trace, run_full_speed, run_ticks, save_trace

logger = logging.getLogger(__name__)

FULL_SPEED_TRACE_ENTRIES = 2_000_000


@dataclass
class BenchResult:
    report: RunReport
    run_dir: Path
    files: dict[str, Path] = field(default_factory=dict)
    verified: Optional[bool] = None  # None when verification was skipped


def available_memory() -> Optional[int]:
    """Physical memory in bytes, or None where the platform does not say."""
    try:
        return os.sysconf("SC_PHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (AttributeError, ValueError, OSError):
        return None


def required_memory(cfg: BenchConfig) -> int:
    dataset = pages_for_megabytes(cfg.data_mb, cfg.page_size) * cfg.page_size
    if cfg.mode == "kv":
        return cfg.records * config.KV_VALUE_SIZE * 2
    multiplier = memory_multiplier(cfg.algo) if cfg.algo in ALGORITHMS else 2
    return dataset * multiplier


def preflight(cfg: BenchConfig) -> None:
    if cfg.algo == "fork" and not FORK_AVAILABLE:
        raise UnsupportedPlatformError("fork is unsupported on this platform")
    needed = required_memory(cfg)
    available = available_memory()
    if available is not None and needed > available:
        raise MemoryBudgetError(
            f"{cfg.algo} on {cfg.data_mb} MB needs {needed / (1 << 20):.0f} MB of page memory, "
            f"{available / (1 << 20):.0f} MB available"
        )


class BenchRunner:
    """Runs one configured experiment end to end."""

    def __init__(self, cfg: BenchConfig, quiet: bool = False):
        self.cfg = cfg.validate()
        self.quiet = quiet

    def _say(self, text: str = "") -> None:
        if not self.quiet:
            print(text)

    def banner(self) -> None:
        cfg = self.cfg
        self._say("=" * 50)
        self._say(f"snapkit {__version__} - {cfg.mode} benchmark")
        self._say("=" * 50)
        self._say(f"Algorithm: {cfg.algo}")
        if cfg.mode == "kv":
            self._say(f"Records: {cfg.records}, operations: {cfg.operations}, update proportion: {cfg.update_prop}")
        else:
            self._say(f"Dataset: {cfg.data_mb} MB in {cfg.page_size}-byte pages")
        if cfg.mode == "tick":
            self._say(f"Ticks: {cfg.tick_ms} ms, uf {cfg.uf}, {cfg.checkpoints} checkpoints every {cfg.interval_s} s")
        elif cfg.mode == "virtual":
            self._say(f"Threads: {cfg.threads}, transactions: {cfg.transactions}")
        self._say("-" * 50)

    def run(self) -> BenchResult:
        preflight(self.cfg)
        self.banner()
        handler = {
            "tick": self._run_tick,
            "full-speed": self._run_full_speed,
            "virtual": self._run_virtual,
            "kv": self._run_kv,
        }[self.cfg.mode]
        result = handler()
        self.print_summary(result)
        return result

    # -- modes --------------------------------------------------------------

    def _page_count(self) -> int:
        return pages_for_megabytes(self.cfg.data_mb, self.cfg.page_size)

    def _initial(self, page_count: int) -> PageImage:
        return create_store(page_count, self.cfg.page_size).to_image()

    def _run_tick(self) -> BenchResult:
        cfg = self.cfg
        page_count = self._page_count()
        schedule = TickSchedule(cfg.tick_length, cfg.uf, cfg.interval_s, cfg.checkpoints)
        trace = generate_trace(page_count, schedule.trace_entries(), cfg.alpha, cfg.seed)
        run_dir = make_run_dir(cfg)
        save_trace(trace, run_dir / "trace.bin")
        sink = NullSink() if cfg.null_sink else FileSink(run_dir / "snapshots", page_count, cfg.page_size)
        if cfg.algo in VIRTUAL_ENGINES:
            algo = create_engine(cfg.algo, page_count, page_size=cfg.page_size, sink=sink)
        else:
            algo = create_algorithm(cfg.algo, page_count, page_size=cfg.page_size, sink=sink)
        self._say("Running ticks...")
        try:
            run = run_ticks(algo, trace, schedule)
        finally:
            algo.close()
        report = summarize(
            run.ticks,
            algo.counters,
            run.checkpoints,
            algorithm=cfg.algo,
            peak_page_bytes=algo.allocated_page_bytes,
            dataset_bytes=algo.dataset_bytes,
            os_shared=getattr(algo, "os_shared", False),
        )
        files = export_csv(report, run_dir, parse_window(cfg.trace_window))
        verified = None
        if cfg.verify and not cfg.null_sink:
            initial = self._initial(page_count)
            verified = True
            for handle in run.handles:
                cid = handle.checkpoint_id
                if hasattr(algo, "expected_image"):
                    expected = algo.expected_image(initial, cid)
                else:
                    expected = oracle_replay(initial, trace, run.trigger_positions[cid])
                if not verify_file(sink.full_path(cid), expected):
                    logger.error("checkpoint %d does not match the replay oracle", cid)
                    verified = False
        return BenchResult(report, run_dir, files, verified)

    def _run_full_speed(self) -> BenchResult:
        cfg = self.cfg
        page_count = self._page_count()
        trace = generate_trace(page_count, FULL_SPEED_TRACE_ENTRIES, cfg.alpha, cfg.seed)
        run_dir = make_run_dir(cfg)
        algo = create_algorithm(cfg.algo, page_count, page_size=cfg.page_size, sink=NullSink())
        self._say(f"Updating at full speed for {cfg.duration_s} s...")
        try:
            result = run_full_speed(algo, trace, cfg.duration_s, cfg.interval_s)
        finally:
            algo.close()
        report = RunReport(
            algorithm=cfg.algo,
            avg_latency=0.0,
            max_latency=0.0,
            median_latency=0.0,
            p90_latency=0.0,
            p99_latency=0.0,
            latency_trace=[],
            max_throughput=result.throughput,
            page_copies=algo.counters.sync_page_copies,
            piggyback_copies=algo.counters.async_page_copies,
            physical_writes=algo.counters.physical_writes,
            logical_writes=algo.counters.logical_writes,
            peak_page_bytes=algo.allocated_page_bytes,
            dataset_bytes=algo.dataset_bytes,
            os_shared=getattr(algo, "os_shared", False),
            extra={"full_speed_checkpoints": result.checkpoints, "updates": result.updates},
        )
        files = export_csv(report, run_dir)
        return BenchResult(report, run_dir, files, None)

    def _run_virtual(self) -> BenchResult:
        cfg = self.cfg
        page_count = self._page_count()
        run_dir = make_run_dir(cfg)
        sink = NullSink() if cfg.null_sink else FileSink(run_dir / "snapshots", page_count, cfg.page_size)
        engine = create_engine(cfg.algo, page_count, page_size=cfg.page_size, sink=sink)
        workload = MixedWorkload(
            record_count=page_count,
            operation_count=cfg.transactions,
            alpha=cfg.alpha,
            client_threads=cfg.threads,
            seed=cfg.seed,
        )
        executor = TransactionExecutor(engine, cfg.threads)
        self._say(f"Running {cfg.transactions} transactions on {cfg.threads} threads...")
        try:
            stats = executor.run(workload.transactions(page_count), triggers=cfg.checkpoints)
        finally:
            engine.close()
        report = RunReport(
            algorithm=cfg.algo,
            avg_latency=0.0,
            max_latency=stats.max_begin_stall,
            median_latency=0.0,
            p90_latency=0.0,
            p99_latency=0.0,
            latency_trace=[],
            max_throughput=stats.throughput,
            page_copies=engine.counters.sync_page_copies,
            piggyback_copies=engine.counters.async_page_copies,
            physical_writes=engine.counters.physical_writes,
            logical_writes=engine.counters.logical_writes,
            peak_page_bytes=engine.allocated_page_bytes,
            dataset_bytes=engine.dataset_bytes,
            extra={"committed": stats.committed, "aborted": stats.aborted, "threads": cfg.threads},
        )
        files = export_csv(report, run_dir)
        verified = None
        if cfg.verify:
            initial = self._initial(page_count)
            final = commit_log_replay(initial, engine.commit_log)
            current = np.stack([engine.read(i) for i in range(page_count)])
            verified = bool(np.array_equal(current, final.pages))
            if not cfg.null_sink:
                for cid in stats.checkpoints:
                    if not verify_file(sink.full_path(cid), engine.expected_image(initial, cid)):
                        logger.error("virtual checkpoint %d does not match the commit log", cid)
                        verified = False
        return BenchResult(report, run_dir, files, verified)

    def _run_kv(self) -> BenchResult:
        cfg = self.cfg
        run_dir = make_run_dir(cfg)
        store = KvStore(cfg.algo, sink=KvDumpSink(run_dir / "dumps"))
        workload = MixedWorkload(
            record_count=cfg.records,
            operation_count=cfg.operations,
            update_proportion=cfg.update_prop,
            alpha=cfg.alpha,
            seed=cfg.seed,
        )
        self._say(f"Loading {cfg.records} records...")
        store.load(workload.load_records())
        initial = store.snapshot(force=True)
        store.wait()
        operations = workload.operations()
        self._say(f"Running {cfg.operations} operations...")
        try:
            result = run_kv_workload(store, operations, SavePolicy(cfg.save_s, 1))
        finally:
            store.close()
        verified = None
        if cfg.verify:
            positions = {initial.checkpoint_id: 0, **result.trigger_positions}
            mismatched = verify_dumps(store.sink, workload.load_records(), operations, positions)
            final = replay_operations(workload.load_records(), operations)
            verified = not mismatched and len(store) == len(final) and all(store.get(k) == v for k, v in final.items())
            self._say(f"Checked {len(positions)} dumps against the op log")
        report = RunReport(
            algorithm=cfg.algo,
            avg_latency=result.avg_latency,
            max_latency=result.max_latency,
            median_latency=0.0,
            p90_latency=0.0,
            p99_latency=0.0,
            latency_trace=[],
            max_throughput=result.throughput,
            peak_page_bytes=result.high_water,
            dataset_bytes=result.dataset_bytes,
            label=store.label,
            extra={
                "max_stall_us": int(round(result.max_stall * 1e6)),
                "snapshots": result.snapshots,
                "live_bytes": result.live_bytes,
                "gc_reclaimed_versions": result.gc.reclaimed_versions,
                "gc_bytes_reclaimed": result.gc.bytes_reclaimed,
            },
        )
        files = export_csv(report, run_dir)
        return BenchResult(report, run_dir, files, verified)

    def print_summary(self, result: BenchResult) -> None:
        report = result.report
        self._say("-" * 50)
        for key, value in report.summary_rows():
            if value not in ("", 0) or key in ("max_latency_us", "page_copies"):
                self._say(f"{key}: {value}")
        if result.verified is not None:
            self._say(f"Verification: {'passed' if result.verified else 'FAILED'}")
        self._say(f"Results in {result.run_dir}")
        self._say("=" * 50)


def run_bench(cfg: BenchConfig, quiet: bool = False) -> BenchResult:
    return BenchRunner(cfg, quiet).run()


SWEEP_KEYS = {
    "sweep_uf": "uf",
    "sweep_data_mb": "data_mb",
    "sweep_algo": "algo",
    "sweep_threads": "threads",
    "sweep_records": "records",
    "sweep_update_prop": "update_prop",
}


def run_matrix(template: BenchConfig, sweep: dict[str, Sequence[Any]], quiet: bool = True) -> tuple[list[dict[str, Any]], Path]:
    """Run the cross product of ``sweep`` sequentially; one summary row per cell."""
    if not sweep or any(len(values) == 0 for values in sweep.values()):
        raise ConfigError("sweep lists must be non-empty")
    names = list(sweep)
    rows: list[dict[str, Any]] = []
    for combo in itertools.product(*(sweep[n] for n in names)):
        cell = dict(zip(names, combo))
        row: dict[str, Any] = dict(cell)
        try:
            result = run_bench(template.merged(**cell), quiet=quiet)
        except (SnapkitError, OSError) as e:
            logger.warning("matrix cell %s failed: %s", cell, e)
            row["error"] = str(e)
        else:
            row.update(dict(result.report.summary_rows()))
            row["verified"] = result.verified
            row["run_dir"] = str(result.run_dir)
        rows.append(row)
    path = write_matrix_csv(rows, output_root(template) / "matrix.csv")
    return rows, path


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snapkit", description="In-memory snapshot algorithm benchmarks")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--list", action="store_true", help="list algorithms and exit")
    parser.add_argument("--config", help="key=value or .json config file (flags win)")
    parser.add_argument("--mode", choices=("tick", "full-speed", "virtual", "kv"))
    parser.add_argument("--algo")
    parser.add_argument("--data-mb", type=float)
    parser.add_argument("--page-size", type=int)
    parser.add_argument("--uf", type=int, help="updates per tick")
    parser.add_argument("--tick-ms", type=float)
    parser.add_argument("--interval-s", type=float)
    parser.add_argument("--checkpoints", type=int)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--transactions", type=int)
    parser.add_argument("--update-prop", type=float)
    parser.add_argument("--records", type=int)
    parser.add_argument("--operations", type=int)
    parser.add_argument("--save-s", type=float)
    parser.add_argument("--duration-s", type=float)
    parser.add_argument("--out")
    parser.add_argument("--trace-window", help="START:END tick window for trace.csv")
    parser.add_argument("--no-verify", action="store_true")
    parser.add_argument("--null-sink", action="store_true")
    for flag in SWEEP_KEYS:
        parser.add_argument("--" + flag.replace("_", "-"), type=_csv_list, help="comma-separated sweep values")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--log-level", default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point."""
    args = build_parser().parse_args(argv)
    level = args.log_level or ("INFO" if args.verbose else "WARNING")
    logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.list:
        for row in describe_algorithms():
            print(
                f"{row['id']:5} latency={row['avg_latency']:9} spike={row['latency_spike']:12} "
                f"taken={row['taken_complexity']:9} throughput={row['max_throughput']:7} "
                f"full={row['full_snapshot']:4} memory={row['memory']:7} {row['available']}"
            )
        return 0

    flags = {
        key: getattr(args, key)
        for key in (
            "mode", "algo", "data_mb", "page_size", "uf", "tick_ms", "interval_s", "checkpoints", "alpha",
            "seed", "threads", "transactions", "update_prop", "records", "operations", "save_s", "duration_s",
            "out", "trace_window",
        )
    }
    if args.no_verify:
        flags["verify"] = False
    if args.null_sink:
        flags["null_sink"] = True
    try:
        sweep = {SWEEP_KEYS[k]: v for k in SWEEP_KEYS if (v := getattr(args, k))}
        if sweep:
            template = build_config(args.config, **flags)
            rows, path = run_matrix(template, sweep, quiet=False)
            print(f"Matrix of {len(rows)} cells written to {path}")
            return 1 if any("error" in r or r.get("verified") is False for r in rows) else 0
        result = run_bench(build_config(args.config, **flags))
    except (ConfigError, UnsupportedPlatformError, MemoryBudgetError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except SnapkitError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\nInterrupted")
        return 130
    return 1 if result.verified is False else 0


if __name__ == "__main__":
    sys.exit(main())
