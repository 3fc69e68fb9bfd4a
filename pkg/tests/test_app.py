import csv
import io
import json
import os
import tempfile
import unittest
from contextlib import redirect_stdout
from pathlib import Path
from unittest import mock

from helpers import HAS_FORK

from snapkit.app import main, run_bench, run_matrix
from snapkit.errors import ConfigError
from snapkit.settings import BenchConfig, build_config, load_config_file, make_run_dir, output_root

SMALL_TICK = ["--data-mb", "0.0625", "--page-size", "256", "--uf", "20", "--tick-ms", "2", "--interval-s", "0.01", "--checkpoints", "2"]


class TempOutput(unittest.TestCase):
    """Points SNAPKIT_OUT at a fresh directory for each test."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)
        patcher = mock.patch.dict(os.environ, {"SNAPKIT_OUT": self.tmp.name})
        patcher.start()
        self.addCleanup(patcher.stop)
        self.addCleanup(self.tmp.cleanup)

    def run_main(self, *argv):
        buf = io.StringIO()
        with redirect_stdout(buf):
            code = main(list(argv))
        return code, buf.getvalue()

    def run_dirs(self):
        return sorted(p for p in self.out.iterdir() if p.is_dir())


class TestConfig(unittest.TestCase):
    def test_key_value_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bench.conf"
            path.write_text("# comment\nalgo = pb\nuf=1_000\nverify=no\n\ndata-mb = 2.5\n")
            values = load_config_file(path)
            self.assertEqual(values, {"algo": "pb", "uf": 1000, "verify": False, "data_mb": 2.5})
            cfg = build_config(path, uf=50)
            self.assertEqual((cfg.algo, cfg.uf, cfg.verify), ("pb", 50, False))

    def test_json_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bench.json"
            path.write_text(json.dumps({"mode": "virtual", "algo": "vpb", "threads": 8}))
            cfg = build_config(path)
            self.assertEqual((cfg.mode, cfg.algo, cfg.threads), ("virtual", "vpb", 8))

    def test_bad_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            unknown = Path(tmp) / "a.conf"
            unknown.write_text("colour=blue\n")
            with self.assertRaises(ConfigError):
                load_config_file(unknown)
            no_equals = Path(tmp) / "b.conf"
            no_equals.write_text("algo\n")
            with self.assertRaises(ConfigError):
                load_config_file(no_equals)
            bad_int = Path(tmp) / "c.conf"
            bad_int.write_text("uf=lots\n")
            with self.assertRaises(ConfigError):
                load_config_file(bad_int)
            with self.assertRaises(ConfigError):
                load_config_file(Path(tmp) / "missing.conf")

    def test_validate(self):
        bad = [
            {"mode": "batch"},
            {"mode": "virtual", "algo": "hg"},
            {"mode": "kv", "algo": "zz"},
            {"data_mb": 0},
            {"threads": 0},
            {"update_prop": 1.5},
            {"page_size": 4098},
            {"uf": -1},
        ]
        for overrides in bad:
            with self.subTest(**overrides):
                with self.assertRaises(ConfigError):
                    BenchConfig(**overrides).validate()
        self.assertEqual(BenchConfig().validate().algo, "hg")

    def test_output_root_env_wins(self):
        cfg = BenchConfig(out="somewhere")
        with mock.patch.dict(os.environ, {"SNAPKIT_OUT": "/tmp/elsewhere"}):
            self.assertEqual(output_root(cfg), Path("/tmp/elsewhere"))
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(output_root(cfg), Path("somewhere"))


class TestRunDir(TempOutput):
    def test_config_is_echoed(self):
        cfg = BenchConfig(algo="pb")
        first = make_run_dir(cfg)
        second = make_run_dir(cfg)
        self.assertNotEqual(first, second)
        self.assertTrue(first.name.startswith("pb-"))
        self.assertEqual(json.loads((first / "config.json").read_text())["algo"], "pb")


class TestMain(TempOutput):
    def test_list(self):
        code, out = self.run_main("--list")
        self.assertEqual(code, 0)
        for algo in ("ns", "cou", "fork", "zz", "pp", "hg", "pb"):
            self.assertIn(algo, out)

    def test_tick_run(self):
        for algo in ("hg", "pb", "cou"):
            with self.subTest(algo=algo):
                code, out = self.run_main("--algo", algo, *SMALL_TICK)
                self.assertEqual(code, 0, out)
                self.assertIn("Verification: passed", out)
        run_dir = self.run_dirs()[0]
        for name in ("config.json", "trace.bin", "trace.csv", "summary.csv", "latency_cdf.csv"):
            self.assertTrue((run_dir / name).exists(), name)
        with open(run_dir / "summary.csv", newline="") as fh:
            summary = dict(csv.reader(fh))
        self.assertEqual(summary["checkpoints"], "2")

    def test_virtual_run(self):
        for algo in ("calc", "vhg", "vpb"):
            with self.subTest(algo=algo):
                cfg = build_config(
                    mode="virtual", algo=algo, data_mb=0.0625, page_size=256, transactions=300, threads=2, checkpoints=2
                )
                result = run_bench(cfg, quiet=True)
                self.assertTrue(result.verified)
                extra = result.report.extra
                self.assertEqual(extra["committed"] + extra["aborted"], 300)

    def test_kv_run(self):
        for algo in ("hg", "pb", "fork") if HAS_FORK else ("hg", "pb"):
            with self.subTest(algo=algo):
                cfg = build_config(mode="kv", algo=algo, records=200, operations=1000, update_prop=0.5, save_s=0.001)
                result = run_bench(cfg, quiet=True)
                self.assertTrue(result.verified)
                self.assertTrue((result.run_dir / "dumps").is_dir())

    def test_kv_run_fails_on_a_bad_dump(self):
        cfg = build_config(mode="kv", algo="hg", records=100, operations=500, update_prop=0.5, save_s=0.001)
        with mock.patch("snapkit.app.verify_dumps", return_value=[3]):
            result = run_bench(cfg, quiet=True)
        self.assertFalse(result.verified)

    def test_fork_unsupported(self):
        with mock.patch("snapkit.app.FORK_AVAILABLE", False):
            code, _ = self.run_main("--algo", "fork", *SMALL_TICK)
        self.assertEqual(code, 2)
        self.assertEqual(self.run_dirs(), [])

    def test_config_error_exit_code(self):
        code, _ = self.run_main("--algo", "nope")
        self.assertEqual(code, 2)

    def test_no_verify(self):
        code, out = self.run_main("--algo", "ns", "--no-verify", *SMALL_TICK)
        self.assertEqual(code, 0)
        self.assertNotIn("Verification", out)


class TestMatrix(TempOutput):
    def test_six_cells(self):
        template = build_config(data_mb=0.0625, page_size=256, tick_ms=2, interval_s=0.01, checkpoints=1)
        rows, path = run_matrix(template, {"algo": ["hg", "pb", "ns"], "uf": ["10", "20"]})
        self.assertEqual(len(rows), 6)
        self.assertEqual(path, self.out / "matrix.csv")
        with open(path, newline="") as fh:
            written = list(csv.DictReader(fh))
        self.assertEqual([(r["algo"], r["uf"]) for r in written][:2], [("hg", "10"), ("hg", "20")])
        self.assertTrue(all(r["verified"] == "True" for r in written))

    def test_failed_cell_is_recorded(self):
        template = build_config(data_mb=0.0625, page_size=256, tick_ms=2, interval_s=0.01, checkpoints=1)
        rows, _ = run_matrix(template, {"algo": ["hg", "calc-typo"]})
        self.assertNotIn("error", rows[0])
        self.assertIn("error", rows[1])

    def test_empty_sweep(self):
        with self.assertRaises(ConfigError):
            run_matrix(BenchConfig(), {"algo": []})


if __name__ == "__main__":
    unittest.main()
