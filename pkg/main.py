"""
lqf - command line entry point of the linear-quadratic fine-tuning engine.

    lqf <command> [--config FILE] [--set key=value]... [--out DIR] [--seed N]

Every command writes config.snapshot, metrics.jsonl and its CSV tables to
the output directory. Exit codes: 0 success, 1 contract or config
violation, 2 numeric failure, 3 storage failure.
"""

import argparse
import logging
import sys

from commands import discover_commands
from config import RunConfig
from engine.errors import LqfError, exit_code_for
from manager import ExperimentManager

logger = logging.getLogger(__name__)


def build_parser(commands) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lqf", description="Linear-quadratic fine-tuning experiments")
    parser.add_argument(
        "command", choices=sorted(commands), help="Experiment to run"
    )
    parser.add_argument(
        "--config", type=str, default=None, help="Config document (key = value lines)"
    )
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override one config key (repeatable)",
    )
    parser.add_argument(
        "--out", type=str, default=None, help="Output directory (default: runs/latest)"
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="Run seed (default: 0)"
    )
    parser.add_argument(
        "--verbose", action="store_true", help="Debug logging"
    )
    parser.add_argument(
        "--quiet", action="store_true", help="Only log warnings and errors"
    )
    return parser


def main(argv=None) -> int:
    """Main entry point; returns the process exit code."""
    commands = discover_commands()
    args = build_parser(commands).parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s", force=True
    )

    try:
        config = RunConfig.resolve(args.config, args.overrides, seed=args.seed, out=args.out)
        manager = ExperimentManager(config)
        for name, command_class in commands.items():
            manager.register_command(name, command_class)
        summary = manager.execute(args.command)
    except (LqfError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return 130

    logger.info(f"{args.command} summary: {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
