"""
Unit Tests for Reports and the Command Line

Tests merging run outputs into quartile and summary reports, and the
fedup_sim entry point.
"""

import contextlib
import io
import json
import math
import tempfile
import unittest
import sys
import os
from pathlib import Path

import pandas as pd
from dotenv import dotenv_values

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import fedup_sim
from fedup.errors import UsageError
from fedup.harness import write_outputs
from fedup.metrics import MetricsReport, RoundMetrics
from fedup.report import build_report, collect_metrics, quartile_table, unlearning_table


def _report(seed, strategy, test_accs, P):
    rows = [RoundMetrics(i + 1, acc, math.nan if i == 0 else 0.5, strategy=strategy, seed=seed)
            for i, acc in enumerate(test_accs)]
    summary = {
        "run_id": "merge", "seed": seed, "strategy": strategy,
        "unlearning": [{"round": 2, "P": P, "R_rec": 1, "bound": 3,
                        "before": {"test_acc": 0.5, "malicious_acc": 0.9},
                        "after": {"test_acc": 0.4, "malicious_acc": 0.1}}],
    }
    return MetricsReport("merge", seed, strategy, rows, summary)


def _populate(directory):
    write_outputs(_report(0, "fedup", [0.2, 0.6], 0.1), directory)
    write_outputs(_report(1, "fedup", [0.4, 0.7], 0.3), directory)
    write_outputs(_report(2, "fedup", [0.6, 0.8], 0.2), directory)
    write_outputs(_report(0, "weight_negation", [0.1, 0.1], None), directory)


class TestReport(unittest.TestCase):
    """Test merged reports"""

    def test_collect_metrics(self):
        """Test every metrics.csv under the directory is merged"""
        with tempfile.TemporaryDirectory() as tmp:
            _populate(tmp)
            merged = collect_metrics(tmp)
        self.assertEqual(len(merged), 8)
        self.assertEqual(merged["strategy"].iloc[0], "fedup")

    def test_quartiles(self):
        """Test per-round quartiles across seeds"""
        with tempfile.TemporaryDirectory() as tmp:
            _populate(tmp)
            table = quartile_table(collect_metrics(tmp))
        row = table[(table["strategy"] == "fedup") & (table["round"] == 1)].iloc[0]
        self.assertEqual(row["runs"], 3)
        self.assertAlmostEqual(row["test_acc_q1"], 0.3, places=12)
        self.assertAlmostEqual(row["test_acc_median"], 0.4, places=12)
        self.assertAlmostEqual(row["test_acc_q3"], 0.5, places=12)
        self.assertTrue(math.isnan(row["malicious_acc_median"]))

    def test_csv_report(self):
        """Test the .csv report file"""
        with tempfile.TemporaryDirectory() as tmp:
            _populate(tmp)
            out = build_report(tmp, Path(tmp) / "out" / "report.csv")
            table = pd.read_csv(out)
        self.assertEqual(len(table), 4)
        self.assertIn("malicious_acc_q3", table.columns)

    def test_json_report(self):
        """Test the .json report aggregates unlearning per strategy"""
        with tempfile.TemporaryDirectory() as tmp:
            _populate(tmp)
            out = build_report(tmp, Path(tmp) / "report.json")
            document = json.loads(out.read_text(encoding="utf-8"))
        self.assertEqual(len(document["runs"]), 4)
        fedup = document["aggregate"]["fedup"]
        self.assertAlmostEqual(fedup["P"]["mean"], 0.2, places=12)
        self.assertAlmostEqual(fedup["P"]["std"], 0.1, places=12)
        self.assertAlmostEqual(fedup["after_malicious_acc"]["mean"], 0.1, places=12)
        self.assertIsNone(document["aggregate"]["weight_negation"]["P"]["mean"])

    def test_unlearning_table(self):
        """Test one row per unlearning event"""
        table = unlearning_table([_report(0, "fedup", [0.5], 0.1).summary])
        self.assertEqual(table["before_malicious_acc"].tolist(), [0.9])

    def test_errors(self):
        """Test bad suffixes and empty directories"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(UsageError):
                build_report(tmp, Path(tmp) / "report.txt")
            with self.assertRaises(UsageError):
                build_report(tmp, Path(tmp) / "report.csv")
            with self.assertRaises(UsageError):
                build_report(tmp, Path(tmp) / "report.json")


def _error_document(stderr):
    return json.loads(stderr[stderr.rindex('{\n  "status"'):])


class TestCommandLine(unittest.TestCase):
    """Test the fedup_sim entry point"""

    def _main(self, argv):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            code = fedup_sim.main(argv)
        return code, out.getvalue(), err.getvalue()

    def test_env_template_lists_settings(self):
        """Test .env.example carries every variable get_config reads"""
        template = dotenv_values(Path(__file__).parent.parent / ".env.example")
        self.assertTrue({"FEDUP_OUTPUT_DIR", "FEDUP_LOG_LEVEL", "FEDUP_WORKERS",
                         "FEDUP_RUN_ACCEPTANCE"} <= set(template))

    def test_schema(self):
        """Test the schema command prints the config schema"""
        code, out, _ = self._main(["schema"])
        self.assertEqual(code, 0)
        self.assertIn("malicious_ids", json.loads(out)["properties"])

    def test_run_and_report(self):
        """Test run writes the three files and report merges them"""
        config = {
            "run_id": "cli", "model": {"arch": "mlp", "hidden": 8},
            "dataset": {"kind": "synthetic", "num_classes": 3, "dim": 4, "per_class_count": 20,
                        "test_per_class": 5},
            "client_count": 3, "total_rounds": 2, "retrain": {"enabled": False},
        }
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "cli.json"
            path.write_text(json.dumps(config), encoding="utf-8")
            code, out, _ = self._main(["run", "--config", str(path), "--seed", "4",
                                       "--override", "total_rounds=3", "--out", tmp])
            self.assertEqual(code, 0)
            result = json.loads(out)
            self.assertEqual(result["rounds"], 3)
            self.assertTrue((Path(tmp) / "cli" / "seed_4" / "events.log").exists())

            code, out, _ = self._main(["report", "--in", tmp, "--out", str(Path(tmp) / "r.csv")])
            self.assertEqual(code, 0)
            self.assertEqual(json.loads(out)["status"], "success")

    def test_error_exit_codes(self):
        """Test failures print an error document and exit by category"""
        with tempfile.TemporaryDirectory() as tmp:
            code, _, err = self._main(["report", "--in", tmp, "--out", str(Path(tmp) / "r.txt")])
            self.assertEqual(code, UsageError.exit_code)
            self.assertEqual(_error_document(err)["category"], "usage")
            code, _, err = self._main(["run", "--config", str(Path(tmp) / "missing.json")])
            self.assertEqual(code, 2)
            self.assertEqual(_error_document(err)["category"], "configuration")


if __name__ == '__main__':
    unittest.main()
