"""
Unit Tests for the Experiment Runner

Tests the timeline on tiny federations, result files, storage
accounting, attack success and seed sweeps.
"""

import tempfile
import unittest
import sys
import os
from pathlib import Path

import numpy as np

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fedup.config import config_from_dict
from fedup.data import AttackSpec, gen_synthetic, make_triggered_testset
from fedup.errors import UsageError
from fedup.harness import (
    StorageModel,
    compute_attack_success,
    parse_seed_range,
    run_experiment,
    run_sweep,
    storage_report,
    write_outputs,
)
from fedup.metrics import frame_to_rows, load_summary, read_csv
from fedup.nn import ModelSpec, init_model


def _tiny_config(**extra):
    raw = {
        "run_id": "tiny",
        "seed": 0,
        "model": {"arch": "mlp", "hidden": 8},
        "dataset": {"kind": "synthetic", "num_classes": 4, "dim": 6, "per_class_count": 30,
                    "test_per_class": 10, "cluster_spread": 0.5},
        "client_count": 5,
        "malicious_ids": [0],
        "attack": {"kind": "backdoor", "poison_fraction": 0.2, "target_class": 1, "trigger": {"size": 2}},
        "training": {"local_epochs": 1, "batch_size": 8},
        "detections": [{"round": 3, "client_id": 0}],
        "total_rounds": 5,
        "max_recovery_rounds": 3,
        "retrain": {"enabled": True, "max_rounds": 4},
    }
    raw.update(extra)
    return config_from_dict(raw)


class TestTimeline(unittest.TestCase):
    """Test one experiment end to end"""

    @classmethod
    def setUpClass(cls):
        cls.report = run_experiment(_tiny_config())

    def test_rounds_are_consecutive(self):
        """Test every executed round produces exactly one row"""
        rounds = [row.round for row in self.report.rows]
        self.assertEqual(rounds, list(range(1, len(rounds) + 1)))
        self.assertGreaterEqual(len(rounds), 5)
        self.assertEqual(self.report.summary["rounds_run"], rounds[-1])

    def test_unlearning_recorded(self):
        """Test the detection round carries the detection and unlearn events"""
        row = self.report.row_for_round(3)
        self.assertIn("detection", row.events)
        self.assertIn("unlearn", row.events)
        entry = self.report.summary["unlearning"][0]
        self.assertEqual(entry["round"], 3)
        self.assertEqual(entry["clients"], [0])
        self.assertEqual(entry["strategy"], "fedup")
        self.assertTrue(0.01 <= entry["P"] <= 0.15)
        self.assertLessEqual(entry["R_rec"], entry["bound"])
        self.assertTrue(entry["within_bound"])
        self.assertIsNotNone(entry["baseline_B"])
        self.assertTrue(any(line.startswith("round=3 event=unlearn P=") for line in self.report.events))

    def test_accuracies_in_range(self):
        """Test every row holds valid accuracies"""
        for row in self.report.rows:
            self.assertTrue(0.0 <= row.test_acc <= 1.0)
            self.assertTrue(0.0 <= row.malicious_acc <= 1.0)

    def test_storage_drops_after_removal(self):
        """Test stored bytes follow the enrolled client count"""
        first, last = self.report.rows[0], self.report.rows[-1]
        self.assertEqual(first.storage_bytes, 6 * self.report.summary["storage"]["model_bytes"])
        self.assertEqual(last.storage_bytes, 5 * self.report.summary["storage"]["model_bytes"])

    def test_deterministic(self):
        """Test a second run reproduces the metrics exactly"""
        again = run_experiment(_tiny_config())
        self.assertEqual(again.to_frame().to_csv(index=False), self.report.to_frame().to_csv(index=False))
        self.assertEqual(again.events, self.report.events)

    def test_outputs_round_trip(self):
        """Test the written CSV and summary match the in-memory report"""
        with tempfile.TemporaryDirectory() as tmp:
            paths = write_outputs(self.report, tmp)
            self.assertEqual(Path(paths["metrics_csv"]), Path(tmp) / "tiny" / "seed_0" / "metrics.csv")
            rows = frame_to_rows(read_csv(paths["metrics_csv"]))
            summary = load_summary(paths["summary_json"])
            events = Path(paths["event_log"]).read_text(encoding="utf-8").splitlines()
        self.assertEqual(rows, list(self.report.rows))
        self.assertEqual(summary["unlearning"][0]["R_rec"], self.report.summary["unlearning"][0]["R_rec"])
        self.assertEqual(summary["final"]["test_acc"], self.report.rows[-1].test_acc)
        self.assertEqual(events, self.report.events)


class TestStrategies(unittest.TestCase):
    """Test every strategy runs in the unlearning slot"""

    def test_baselines(self):
        """Test each baseline produces one unlearning entry under its name"""
        strategies = ["natural_forgetting", "weight_negation", "retrain",
                      {"kind": "random_prune", "P": 0.1}, {"kind": "malicious_magnitude_prune", "P": 0.1}]
        for strategy in strategies:
            with self.subTest(strategy=strategy):
                report = run_experiment(_tiny_config(strategy=strategy, fixed_recovery_rounds=1))
                entry = report.summary["unlearning"][0]
                name = strategy if isinstance(strategy, str) else strategy["kind"]
                self.assertEqual(entry["strategy"], name)
                self.assertEqual(entry["R_rec"], 1)
                self.assertEqual(report.strategy, name)

    def test_false_positive(self):
        """Test unlearning a benign client without any attack"""
        report = run_experiment(_tiny_config(malicious_ids=[], attack=None,
                                             detections=[{"round": 3, "client_id": 2}],
                                             retrain={"enabled": False}))
        entry = report.summary["unlearning"][0]
        self.assertEqual(entry["clients"], [2])
        self.assertIsNone(entry["R_star"])
        self.assertIsNotNone(entry["after"]["forgetting_acc"])

    def test_rate_limited_detection_stays_pending(self):
        """Test a second detection inside T rounds waits"""
        report = run_experiment(_tiny_config(
            client_count=7, malicious_ids=[0, 1],
            detections=[{"round": 2, "client_id": 0}, {"round": 4, "client_id": 1}],
            fixed_recovery_rounds=0, retrain={"enabled": False}))
        self.assertEqual(len(report.summary["unlearning"]), 1)
        self.assertEqual(report.summary["pending_detections"], [1])
        self.assertIn("rate_limited", report.row_for_round(4).events)

    def test_label_flip(self):
        """Test attack success is measured on the flipped samples"""
        report = run_experiment(_tiny_config(
            attack={"kind": "label_flip", "poison_fraction": 1.0, "source_class": 2, "target_class": 3},
            retrain={"enabled": False}))
        values = [row.malicious_acc for row in report.rows]
        finite = [v for v in values if not np.isnan(v)]
        self.assertIn(len(finite), (0, len(values)))
        self.assertTrue(all(0.0 <= v <= 1.0 for v in finite))


class TestStorageModel(unittest.TestCase):
    """Test closed-form storage accounting"""

    def test_ratio(self):
        """Test ten clients over twenty rounds"""
        storage = StorageModel.from_counts(10, 20, 1000)
        self.assertEqual(storage.fedup_bytes, 11 * 1000)
        self.assertEqual(storage.historical_bytes, 200 * 1000)
        self.assertEqual(storage.negation_bytes, 1000)
        self.assertAlmostEqual(storage.ratio, 200 / 11, places=12)

    def test_from_config(self):
        """Test the model size is derived from the configured architecture"""
        storage = storage_report(_tiny_config())
        self.assertEqual(storage.client_count, 5)
        self.assertEqual(storage.rounds, 5)
        # header, per-layer records and float32 arrays for 6 -> 8 -> 4
        self.assertGreater(storage.model_bytes, 4 * (6 * 8 + 8 + 8 * 4 + 4))
        self.assertEqual(storage.to_dict()["historical_to_fedup_ratio"], storage.ratio)


class TestAttackSuccess(unittest.TestCase):
    """Test the attack success metric"""

    def test_untrained_models_sit_at_chance(self):
        """Test fresh models hit the target class about 1/C of the time"""
        test = gen_synthetic(10, 16, 10, 0.5, seed=0)
        triggered = make_triggered_testset(test, AttackSpec("backdoor", target_class=3))
        spec = ModelSpec("mlp", (16,), 10, hidden=32)
        rates = [compute_attack_success(init_model(spec, seed), triggered) for seed in range(200)]
        self.assertAlmostEqual(float(np.mean(rates)), 0.1, delta=0.1)

    def test_needs_samples(self):
        """Test a missing or empty set is a usage error"""
        model = init_model(ModelSpec("mlp", (4,), 2, hidden=3), 0)
        with self.assertRaises(UsageError):
            compute_attack_success(model, None)
        empty = gen_synthetic(2, 4, 1, 0.5, seed=0).subset(np.zeros(0, dtype=np.int64))
        with self.assertRaises(UsageError):
            compute_attack_success(model, empty)


class TestSweeps(unittest.TestCase):
    """Test seed ranges and sweeps"""

    def test_parse_seed_range(self):
        """Test inclusive ranges and comma lists"""
        self.assertEqual(parse_seed_range("0..3"), [0, 1, 2, 3])
        self.assertEqual(parse_seed_range("4,1,9"), [4, 1, 9])
        self.assertEqual(parse_seed_range("7"), [7])
        for bad in ("", "a..b", "5..2", "1,x"):
            with self.assertRaises(UsageError):
                parse_seed_range(bad)

    def test_sweep_serial_and_parallel_agree(self):
        """Test a process-pool sweep writes the same files as a serial one"""
        config = _tiny_config(total_rounds=3, detections=[], retrain={"enabled": False})
        with tempfile.TemporaryDirectory() as serial, tempfile.TemporaryDirectory() as parallel:
            first = run_sweep(config, [0, 1], serial, workers=1)
            second = run_sweep(config, [0, 1], parallel, workers=2)
            self.assertEqual(len(first), 2)
            for a, b in zip(first, second):
                self.assertEqual(Path(a["metrics_csv"]).read_text(), Path(b["metrics_csv"]).read_text())
            self.assertTrue((Path(serial) / "tiny" / "seed_1" / "summary.json").exists())
            seed_0 = Path(first[0]["metrics_csv"]).read_text()
            seed_1 = Path(first[1]["metrics_csv"]).read_text()
        self.assertNotEqual(seed_0, seed_1)


if __name__ == '__main__':
    unittest.main()
