import csv
import os
import tempfile
import unittest

from snapkit.core import AlgorithmCounters, SnapshotHandle
from snapkit.errors import ConfigError, SnapkitError
from snapkit.metrics import (
    CheckpointRecord,
    MetricsRecorder,
    PhaseMarker,
    TickMetrics,
    export_csv,
    latency_cdf,
    parse_window,
    percentiles,
    summarize,
    write_matrix_csv,
)


def ticks_ms(*latencies_ms):
    return [TickMetrics(i, ms / 1000.0, 10) for i, ms in enumerate(latencies_ms)]


class TestSummarize(unittest.TestCase):
    def test_average_and_max(self):
        report = summarize(ticks_ms(1, 1, 9, 1), algorithm="hg")
        self.assertAlmostEqual(report.avg_latency, 0.003)
        self.assertAlmostEqual(report.max_latency, 0.009)
        self.assertAlmostEqual(report.median_latency, 0.001)
        self.assertAlmostEqual(report.spike_ratio, 9.0)

    def test_empty_stream(self):
        with self.assertRaises(SnapkitError):
            summarize([])
        with self.assertRaises(SnapkitError):
            percentiles([])

    def test_counters_and_memory(self):
        counters = AlgorithmCounters(logical_writes=10, physical_writes=20, sync_page_copies=3, async_page_copies=4)
        ticks = ticks_ms(1, 2)
        ticks[1].overrun = True
        ticks[1].phase_marker = PhaseMarker.TAKEN
        report = summarize(ticks, counters, algorithm="pp", peak_page_bytes=300, dataset_bytes=100)
        self.assertEqual((report.page_copies, report.piggyback_copies), (3, 4))
        self.assertEqual(report.physical_writes, 2 * report.logical_writes)
        self.assertEqual(report.memory_ratio, 3.0)
        self.assertEqual(report.overruns, 1)
        self.assertEqual(report.taken_phase_ticks, 1)

    def test_checkpoint_overhead(self):
        handle = SnapshotHandle(1)
        handle.access_started, handle.access_finished = 1.0, 1.5
        record = CheckpointRecord.from_handle(handle, 300)
        report = summarize(ticks_ms(1), checkpoints=[record])
        self.assertEqual(report.checkpoint_overhead, [0.5])
        self.assertEqual(record.trace_position, 300)


class TestRecorder(unittest.TestCase):
    def test_merged_order(self):
        recorder = MetricsRecorder()
        for t in reversed(ticks_ms(1, 2, 3)):
            recorder.record_tick(t)
        recorder.record_checkpoint(CheckpointRecord(2, 0.0, 0.0, 1))
        recorder.record_checkpoint(CheckpointRecord(1, 0.0, 0.0, 1))
        ticks, checkpoints = recorder.merged()
        self.assertEqual([t.tick_index for t in ticks], [0, 1, 2])
        self.assertEqual([c.checkpoint_id for c in checkpoints], [1, 2])

    def test_capacity(self):
        recorder = MetricsRecorder(capacity=2)
        for t in ticks_ms(1, 2, 3):
            recorder.record_tick(t)
        self.assertEqual([t.tick_index for t in recorder.ticks], [1, 2])


class TestCsv(unittest.TestCase):
    def test_export(self):
        ticks = ticks_ms(1, 1, 9, 1)
        ticks[2].phase_marker = PhaseMarker.TAKEN
        report = summarize(ticks, algorithm="hg")
        with tempfile.TemporaryDirectory() as tmp:
            paths = export_csv(report, tmp)
            with open(paths["trace"], newline="") as fh:
                rows = list(csv.DictReader(fh))
            self.assertEqual([int(r["latency_us"]) for r in rows], [1000, 1000, 9000, 1000])
            self.assertEqual(rows[2]["phase"], "taken_phase")
            with open(paths["summary"], newline="") as fh:
                summary = dict(csv.reader(fh))
            self.assertEqual(summary["avg_latency_us"], "3000")
            self.assertEqual(summary["max_latency_us"], "9000")
            with open(paths["cdf"], newline="") as fh:
                cdf = list(csv.DictReader(fh))
            self.assertEqual(cdf[-1]["fraction"], "1.0")

    def test_window(self):
        report = summarize(ticks_ms(1, 2, 3, 4, 5))
        with tempfile.TemporaryDirectory() as tmp:
            paths = export_csv(report, tmp, parse_window("1:3"))
            with open(paths["trace"], newline="") as fh:
                rows = list(csv.DictReader(fh))
        self.assertEqual([r["tick"] for r in rows], ["1", "2"])

    def test_bad_window_and_path(self):
        self.assertIsNone(parse_window(""))
        with self.assertRaises(ConfigError):
            parse_window("5")
        with self.assertRaises(ConfigError):
            parse_window("4:2")
        with self.assertRaises(ConfigError):
            export_csv(summarize(ticks_ms(1)), "")

    def test_cdf(self):
        self.assertEqual(latency_cdf([0.001, 0.001, 0.002, 0.004]), [(1000, 0.5), (2000, 0.75), (4000, 1.0)])
        self.assertEqual(latency_cdf([]), [])

    def test_matrix(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_matrix_csv([{"algo": "hg", "uf": 1}, {"algo": "pb", "error": "boom"}], os.path.join(tmp, "m.csv"))
            with open(path, newline="") as fh:
                rows = list(csv.DictReader(fh))
        self.assertEqual(list(rows[0]), ["algo", "uf", "error"])
        self.assertEqual(rows[1]["uf"], "")


if __name__ == "__main__":
    unittest.main()
