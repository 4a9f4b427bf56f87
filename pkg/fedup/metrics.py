"""
Per-round metrics, the structured round event log and result emission.

CSV columns: run_id, seed, strategy, round, test_acc, malicious_acc,
event, storage_bytes. Multiple events in one round are joined with ';'.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import IntegrityError, OutputError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["run_id", "seed", "strategy", "round", "test_acc", "malicious_acc", "event", "storage_bytes"]
EVENT_SEPARATOR = ";"


# ============================================================================
# Event log
# ============================================================================

def _format_value(value, sep: str = "+") -> str:
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return sep.join(_format_value(v) for v in items)
    if isinstance(value, float):
        return format(value, ".8g")
    return str(value)


@dataclass(frozen=True)
class Event:
    round: int
    name: str
    detail: Tuple[Tuple[str, object], ...] = ()

    def get(self, key: str, default=None):
        return dict(self.detail).get(key, default)

    def render(self) -> str:
        if self.name == "unlearn":
            fields = " ".join(f"{k}={_format_value(v, ',')}" for k, v in self.detail)
            return f"round={self.round} event=unlearn {fields}"
        detail = ",".join(f"{k}={_format_value(v)}" for k, v in self.detail)
        return f"round={self.round} event={self.name} detail={detail}"


@dataclass
class EventLog:
    """Append-only list of round events, mirrored to the module logger."""

    events: List[Event] = field(default_factory=list)

    def record(self, round_index: int, name: str, level: int = logging.INFO, **detail) -> Event:
        event = Event(int(round_index), name, tuple(detail.items()))
        self.events.append(event)
        logger.log(level, event.render())
        return event

    def warn(self, round_index: int, name: str, **detail) -> Event:
        return self.record(round_index, name, logging.WARNING, **detail)

    def for_round(self, round_index: int) -> List[Event]:
        return [e for e in self.events if e.round == round_index]

    def named(self, name: str) -> List[Event]:
        return [e for e in self.events if e.name == name]

    def lines(self) -> List[str]:
        return [e.render() for e in self.events]

    def __len__(self) -> int:
        return len(self.events)


# ============================================================================
# Round metrics and run report
# ============================================================================

@dataclass(frozen=True)
class RoundMetrics:
    round: int
    test_acc: float
    malicious_acc: float
    events: Tuple[str, ...] = ()
    storage_bytes: int = 0
    strategy: str = "fedup"
    seed: int = 0

    def __post_init__(self):
        for name in ("test_acc", "malicious_acc"):
            value = getattr(self, name)
            if not math.isnan(value) and not 0.0 <= value <= 1.0:
                raise IntegrityError(f"{name}={value} outside [0, 1] in round {self.round}")


@dataclass
class MetricsReport:
    """Everything one run emits: per-round rows, the summary and the event lines."""

    run_id: str
    seed: int
    strategy: str
    rows: List[RoundMetrics]
    summary: Dict
    events: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return rows_to_frame(self.run_id, self.rows)

    def row_for_round(self, round_index: int) -> RoundMetrics:
        for row in self.rows:
            if row.round == round_index:
                return row
        raise KeyError(round_index)


def rows_to_frame(run_id: str, rows: Sequence[RoundMetrics]) -> pd.DataFrame:
    records = [{
        "run_id": run_id,
        "seed": row.seed,
        "strategy": row.strategy,
        "round": row.round,
        "test_acc": row.test_acc,
        "malicious_acc": row.malicious_acc,
        "event": EVENT_SEPARATOR.join(row.events),
        "storage_bytes": row.storage_bytes,
    } for row in rows]
    return pd.DataFrame.from_records(records, columns=CSV_COLUMNS)


def frame_to_rows(frame: pd.DataFrame) -> List[RoundMetrics]:
    rows = []
    for record in frame.to_dict(orient="records"):
        event = record["event"]
        rows.append(RoundMetrics(
            round=int(record["round"]),
            test_acc=float(record["test_acc"]),
            malicious_acc=float(record["malicious_acc"]),
            events=tuple(event.split(EVENT_SEPARATOR)) if event else (),
            storage_bytes=int(record["storage_bytes"]),
            strategy=str(record["strategy"]),
            seed=int(record["seed"]),
        ))
    return rows


# ============================================================================
# Emission
# ============================================================================

def jsonable(value):
    """Plain JSON types; sets become sorted lists and non-finite floats None."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [jsonable(v) for v in items]
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def emit_csv(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        report.to_frame().to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise OutputError(f"cannot write metrics CSV {path}: {e}") from e
    return path


def read_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Parse a metrics CSV back with exact float round-trip."""
    path = Path(path)
    try:
        return pd.read_csv(
            path,
            float_precision="round_trip",
            keep_default_na=False,
            na_values={"test_acc": [""], "malicious_acc": [""]},
            dtype={"run_id": str, "strategy": str, "event": str},
        )
    except OSError as e:
        raise OutputError(f"cannot read metrics CSV {path}: {e}") from e


def summary_document(report: MetricsReport) -> str:
    return json.dumps(jsonable(report.summary), indent=2, sort_keys=True) + "\n"


def emit_summary_json(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(summary_document(report), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write summary {path}: {e}") from e
    return path


def emit_event_log(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in report.events), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write event log {path}: {e}") from e
    return path


def load_summary(path: Union[str, Path]) -> Dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise OutputError(f"cannot read summary {path}: {e}") from e
