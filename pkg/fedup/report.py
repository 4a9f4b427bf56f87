"""
Merge per-run result files into one report.

CSV output: per (strategy, round) quartiles of test and malicious-data
accuracy across seeds. JSON output: every run summary plus mean/std of the
unlearning before/after metrics per strategy.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import pandas as pd

from .errors import OutputError, UsageError
from .metrics import jsonable, load_summary, read_csv

logger = logging.getLogger(__name__)

QUARTILES = {"q1": 0.25, "median": 0.5, "q3": 0.75}


def collect_metrics(in_dir: Union[str, Path]) -> pd.DataFrame:
    """Every metrics.csv under in_dir, merged and sorted."""
    paths = sorted(Path(in_dir).rglob("metrics.csv"))
    if not paths:
        raise UsageError(f"no metrics.csv found under {in_dir}")
    frames = [read_csv(path) for path in paths]
    merged = pd.concat(frames, ignore_index=True)
    return merged.sort_values(["strategy", "run_id", "seed", "round"], kind="mergesort").reset_index(drop=True)


def collect_summaries(in_dir: Union[str, Path]) -> List[Dict]:
    summaries = [load_summary(path) for path in sorted(Path(in_dir).rglob("summary.json"))]
    return sorted(summaries, key=lambda s: (s.get("strategy", ""), s.get("run_id", ""), s.get("seed", 0)))


def quartile_table(metrics: pd.DataFrame) -> pd.DataFrame:
    """Per strategy and round, the run count and accuracy quartiles."""
    grouped = metrics.groupby(["strategy", "round"], sort=True)
    table = grouped.size().rename("runs").to_frame()
    for column in ("test_acc", "malicious_acc"):
        for name, q in QUARTILES.items():
            table[f"{column}_{name}"] = grouped[column].quantile(q)
    return table.reset_index()


def unlearning_table(summaries: List[Dict]) -> pd.DataFrame:
    """One row per unlearning event of every run."""
    records = []
    for summary in summaries:
        for event in summary.get("unlearning", []):
            before, after = event.get("before") or {}, event.get("after") or {}
            records.append({
                "strategy": summary.get("strategy"),
                "run_id": summary.get("run_id"),
                "seed": summary.get("seed"),
                "round": event.get("round"),
                "P": event.get("P"),
                "R_rec": event.get("R_rec"),
                "bound": event.get("bound"),
                "before_test_acc": before.get("test_acc"),
                "after_test_acc": after.get("test_acc"),
                "before_malicious_acc": before.get("malicious_acc"),
                "after_malicious_acc": after.get("malicious_acc"),
            })
    return pd.DataFrame.from_records(records)


def aggregate_unlearning(summaries: List[Dict]) -> Dict:
    """Mean and standard deviation of each unlearning column per strategy."""
    table = unlearning_table(summaries)
    if table.empty:
        return {}
    values = table.drop(columns=["strategy", "run_id", "seed", "round"]).apply(pd.to_numeric, errors="coerce")
    numeric = table[["strategy"]].join(values)
    grouped = numeric.groupby("strategy", sort=True)
    means, stds = grouped.mean(), grouped.std()
    aggregate = {}
    for strategy in means.index:
        aggregate[strategy] = {
            column: {"mean": means.loc[strategy, column], "std": stds.loc[strategy, column]}
            for column in means.columns
        }
    return aggregate


def build_report(in_dir: Union[str, Path], out_path: Union[str, Path]) -> Path:
    """Write the merged report; the format follows the output suffix (.csv or .json)."""
    out_path = Path(out_path)
    suffix = out_path.suffix.lower()
    if suffix not in (".csv", ".json"):
        raise UsageError(f"report output must end in .csv or .json, got {out_path.name}")

    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        if suffix == ".csv":
            quartile_table(collect_metrics(in_dir)).to_csv(out_path, index=False, lineterminator="\n")
        else:
            summaries = collect_summaries(in_dir)
            if not summaries:
                raise UsageError(f"no summary.json found under {in_dir}")
            document = {"runs": summaries, "aggregate": aggregate_unlearning(summaries)}
            out_path.write_text(json.dumps(jsonable(document), indent=2, sort_keys=True) + "\n",
                                encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write report {out_path}: {e}") from e
    logger.info(f"Report written to {out_path}")
    return out_path
