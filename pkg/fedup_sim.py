"""
FedUP simulation CLI.

    run    --config <file> [--seed N] [--override k=v ...] [--out DIR]
    sweep  --config <file> --seeds a..b [--workers N] [--out DIR]
    report --in <dir> --out <file.csv|file.json>
    schema

Results go to --out, else $FEDUP_OUTPUT_DIR, else ./results. Every command
prints a JSON document; failures go to stderr with a nonzero exit code
chosen by the error category.
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from dotenv import load_dotenv

from fedup.config import CONFIG_SCHEMA, load_config
from fedup.errors import FedUPError, error_response
from fedup.harness import parse_seed_range, run_experiment, run_sweep, write_outputs
from fedup.report import build_report

# Load environment variables
load_dotenv()

logger = logging.getLogger("fedup")


def get_config() -> dict:
    """Load configuration from environment variables."""
    return {
        "output_dir": os.getenv("FEDUP_OUTPUT_DIR", "results"),
        "log_level": os.getenv("FEDUP_LOG_LEVEL", "INFO").upper(),
        "workers": int(os.getenv("FEDUP_WORKERS", "1")),
    }


def cmd_run(args, env: Dict) -> Dict:
    config = load_config(args.config, args.override, args.seed)
    print("=" * 60, file=sys.stderr)
    print(f"FedUP run: {config.run_id}  seed={config.seed}  strategy={config.strategy_name}", file=sys.stderr)
    print("=" * 60, file=sys.stderr)
    report = run_experiment(config)
    files = write_outputs(report, args.out or env["output_dir"])
    return {
        "status": "success",
        "operation": "run",
        "run_id": report.run_id,
        "seed": report.seed,
        "rounds": len(report.rows),
        "unlearning_events": len(report.summary["unlearning"]),
        "files": files,
    }


def cmd_sweep(args, env: Dict) -> Dict:
    config = load_config(args.config, args.override)
    seeds = parse_seed_range(args.seeds)
    workers = args.workers or env["workers"]
    print("=" * 60, file=sys.stderr)
    print(f"FedUP sweep: {config.run_id}  seeds={seeds[0]}..{seeds[-1]}  workers={workers}", file=sys.stderr)
    print("=" * 60, file=sys.stderr)
    results = run_sweep(config, seeds, args.out or env["output_dir"], workers)
    return {
        "status": "success",
        "operation": "sweep",
        "run_id": config.run_id,
        "seeds": seeds,
        "runs": results,
    }


def cmd_report(args, env: Dict) -> Dict:
    path = build_report(args.in_dir, args.out)
    return {"status": "success", "operation": "report", "output": str(path)}


def cmd_schema(args, env: Dict) -> Dict:
    return CONFIG_SCHEMA


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="FedUP federated unlearning simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one experiment")
    run.add_argument("--config", required=True, help="Experiment config (JSON)")
    run.add_argument("--seed", type=int, default=None, help="Override the config seed")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="Override a config field, dotted keys, JSON values")
    run.add_argument("--out", default=None, help="Output directory")
    run.set_defaults(handler=cmd_run)

    sweep = sub.add_parser("sweep", help="Run one experiment per seed")
    sweep.add_argument("--config", required=True, help="Experiment config (JSON)")
    sweep.add_argument("--seeds", required=True, help="Seed range a..b or list a,b,c")
    sweep.add_argument("--workers", type=int, default=None, help="Parallel processes")
    sweep.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    sweep.add_argument("--out", default=None, help="Output directory")
    sweep.set_defaults(handler=cmd_sweep)

    report = sub.add_parser("report", help="Merge run outputs")
    report.add_argument("--in", dest="in_dir", required=True, help="Directory with run outputs")
    report.add_argument("--out", required=True, help="Report file (.csv or .json)")
    report.set_defaults(handler=cmd_report)

    schema = sub.add_parser("schema", help="Print the config JSON schema")
    schema.set_defaults(handler=cmd_schema)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    env = get_config()
    logging.basicConfig(
        level=getattr(logging, env["log_level"], logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    args = build_parser().parse_args(argv)
    try:
        result = args.handler(args, env)
    except FedUPError as e:
        print(json.dumps(error_response(args.command, e), indent=2), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure in '{args.command}'")
        print(json.dumps(error_response(args.command, e), indent=2), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
