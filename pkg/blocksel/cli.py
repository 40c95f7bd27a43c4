from __future__ import annotations

import argparse
from pathlib import Path
from typing import Sequence

from rich.console import Console
from rich.table import Table

from blocksel import harness
from blocksel.config import RunConfig, load_config
from blocksel.errors import (
    BlockselError,
    ConfigurationError,
    NoRunsFoundError,
    RunLockedError,
)
from blocksel.telemetry import configure_logging, get_logger
from blocksel.trainer import ExperimentRecord

log = get_logger("cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_LOCKED = 3


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="re-seed GA, training, data and OTDD")
    common.add_argument("--toy", action="store_true", help="toy 3-block CNN on synthetic data")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="blocksel", description="Block-level transfer-learning selection.")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("run-ga", "GA block selection, final training and evaluation"),
        ("block-importance", "OTDD block importance per block"),
        ("block-accuracy", "train/test accuracy with one trainable block"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--output-dir", type=Path, default=None, help="override output_dir")
        if name == "run-ga":
            p.add_argument("--no-resume", action="store_true", help="ignore an existing checkpoint")

    for name, help_text in (
        ("report", "compare runs against published numbers"),
        ("plot", "re-render charts from CSV artifacts"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--dir", type=Path, required=True, help="run or parent directory")

    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.toy:
        if args.config is not None:
            log.warning("--toy given: ignoring %s", args.config)
        config = RunConfig.toy(seed=args.seed or 0)
    elif args.config is None:
        raise ConfigurationError("--config is required unless --toy is given")
    else:
        config = load_config(args.config)

    if args.seed is not None:
        config = config.with_seed(args.seed)

    if args.output_dir is not None:
        config = config.with_output_dir(args.output_dir)

    return config


def _print_record(console: Console, record: ExperimentRecord) -> None:
    table = Table(title="experiment record")
    table.add_column("metric")
    table.add_column("value", justify="right")

    for key, value in record.to_dict().items():
        table.add_row(key, str(value))

    console.print(table)


def run(args: argparse.Namespace, console: Console) -> None:
    if args.command == "report":
        path = harness.cmd_report(args.dir)
        console.print(path.read_text(encoding="utf-8"), markup=False)
        return

    if args.command == "plot":
        for path in harness.cmd_plot(args.dir):
            console.print(str(path), markup=False)
        return

    config = resolve_config(args)

    if args.command == "run-ga":
        _print_record(console, harness.cmd_run_ga(config, resume=not args.no_resume))
    elif args.command == "block-importance":
        report = harness.cmd_block_importance(config)
        for entry in report.entries:
            console.print(f"block {entry.block_id}: BI {entry.value:.4f}", markup=False)
    else:
        for row in harness.cmd_block_accuracy(config):
            console.print(
                f"block {row['block']}: train BA {row['train_BA']:.4f}, test BA {row['test_BA']:.4f}",
                markup=False,
            )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    console = Console()

    try:
        run(args, console)
    except (ConfigurationError, NoRunsFoundError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except RunLockedError as exc:
        log.error("%s", exc)
        return EXIT_LOCKED
    except BlockselError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE

    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
