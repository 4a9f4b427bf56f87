"""
Unit Tests for Metrics and Result Emission

Tests the round event log, metric rows and the CSV, JSON and event-log
outputs.
"""

import json
import math
import tempfile
import unittest
import sys
import os
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fedup.errors import IntegrityError, OutputError
from fedup.metrics import (
    CSV_COLUMNS,
    Event,
    EventLog,
    MetricsReport,
    RoundMetrics,
    emit_csv,
    emit_event_log,
    emit_summary_json,
    frame_to_rows,
    load_summary,
    read_csv,
    rows_to_frame,
    summary_document,
)


def _report():
    rows = [
        RoundMetrics(1, 0.1234567890123, 0.5, storage_bytes=1100, seed=3),
        RoundMetrics(2, 1.0 / 3.0, math.nan, ("detection", "unlearn"), 1100, seed=3),
        RoundMetrics(3, 0.0, 0.0, ("recovery",), 1000, seed=3),
    ]
    summary = {"run_id": "unit", "final": {"test_acc": 0.0, "malicious_acc": math.nan},
               "pending": {2, 1}, "unlearning": []}
    events = ["round=2 event=detection detail=client=0",
              "round=2 event=unlearn P=0.1 layers=2 pruned=9 clients=0 bound=3"]
    return MetricsReport("unit", 3, "fedup", rows, summary, events)


class TestEventLog(unittest.TestCase):
    """Test event rendering and lookup"""

    def test_render_detail(self):
        """Test the generic key=value rendering"""
        event = Event(7, "rate_limited", (("pending", [1, 2]), ("next_round", 15)))
        self.assertEqual(event.render(), "round=7 event=rate_limited detail=pending=1+2,next_round=15")

    def test_render_unlearn(self):
        """Test the unlearn event line"""
        event = Event(20, "unlearn", (("P", 0.05042044), ("layers", 2), ("pruned", 61),
                                      ("clients", [0, 1, 2]), ("bound", 2)))
        self.assertEqual(event.render(),
                         "round=20 event=unlearn P=0.05042044 layers=2 pruned=61 clients=0,1,2 bound=2")

    def test_record_and_query(self):
        """Test recording keeps order and supports lookups"""
        log = EventLog()
        log.record(1, "detection", client=4)
        log.warn(1, "update_diverged", client=2)
        log.record(2, "detection", client=5)
        self.assertEqual(len(log), 3)
        self.assertEqual([e.get("client") for e in log.named("detection")], [4, 5])
        self.assertEqual([e.name for e in log.for_round(1)], ["detection", "update_diverged"])
        self.assertEqual(log.lines()[0], "round=1 event=detection detail=client=4")
        self.assertIsNone(log.events[0].get("missing"))

    def test_mirrored_to_logger(self):
        """Test events reach the module logger"""
        with self.assertLogs("fedup.metrics", level="WARNING") as captured:
            EventLog().warn(3, "poison_skipped", client=1)
        self.assertIn("event=poison_skipped", captured.output[0])


class TestRoundMetrics(unittest.TestCase):
    """Test metric rows"""

    def test_accuracy_range(self):
        """Test accuracies outside [0, 1] are rejected and NaN is allowed"""
        with self.assertRaises(IntegrityError):
            RoundMetrics(1, 1.5, 0.0)
        with self.assertRaises(IntegrityError):
            RoundMetrics(1, 0.5, -0.1)
        self.assertTrue(math.isnan(RoundMetrics(1, 0.5, math.nan).malicious_acc))

    def test_frame_columns(self):
        """Test the frame has the CSV columns and joined events"""
        frame = _report().to_frame()
        self.assertEqual(list(frame.columns), CSV_COLUMNS)
        self.assertEqual(frame["event"].tolist(), ["", "detection;unlearn", "recovery"])
        self.assertEqual(frame["run_id"].unique().tolist(), ["unit"])

    def test_row_lookup(self):
        """Test row_for_round"""
        report = _report()
        self.assertEqual(report.row_for_round(3).storage_bytes, 1000)
        with self.assertRaises(KeyError):
            report.row_for_round(9)


class TestEmission(unittest.TestCase):
    """Test the result files"""

    def test_csv_round_trip(self):
        """Test the CSV parses back to the same rows, floats exact"""
        report = _report()
        with tempfile.TemporaryDirectory() as tmp:
            path = emit_csv(report, Path(tmp) / "nested" / "metrics.csv")
            frame = read_csv(path)
        rows = frame_to_rows(frame)
        self.assertEqual(len(rows), 3)
        self.assertEqual(rows[0], report.rows[0])
        self.assertEqual(rows[2], report.rows[2])
        self.assertEqual(rows[1].test_acc, 1.0 / 3.0)
        self.assertTrue(math.isnan(rows[1].malicious_acc))
        self.assertEqual(rows[1].events, ("detection", "unlearn"))

    def test_frame_round_trip_in_memory(self):
        """Test rows_to_frame and frame_to_rows agree"""
        report = _report()
        rows = frame_to_rows(rows_to_frame("unit", report.rows))
        self.assertEqual(rows[0], report.rows[0])
        self.assertEqual(rows[2], report.rows[2])

    def test_summary_json(self):
        """Test NaN becomes null and sets become sorted lists"""
        report = _report()
        document = json.loads(summary_document(report))
        self.assertIsNone(document["final"]["malicious_acc"])
        self.assertEqual(document["pending"], [1, 2])
        with tempfile.TemporaryDirectory() as tmp:
            path = emit_summary_json(report, Path(tmp) / "summary.json")
            self.assertEqual(load_summary(path), document)

    def test_event_log_file(self):
        """Test one event per line"""
        report = _report()
        with tempfile.TemporaryDirectory() as tmp:
            path = emit_event_log(report, Path(tmp) / "events.log")
            lines = path.read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines, report.events)

    def test_unreadable_outputs(self):
        """Test read failures name the path"""
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(OutputError):
                load_summary(Path(tmp) / "absent.json")
            with self.assertRaises(OutputError):
                read_csv(Path(tmp) / "absent.csv")


if __name__ == '__main__':
    unittest.main()
