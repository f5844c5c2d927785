import argparse
import logging
import os
import sys

import config
from harness.experiment_config import ConfigError, load_config
from harness.experiments import (
    cmd_ablate_correction,
    cmd_bench_solvers,
    cmd_correlation_study,
    cmd_sequence_reuse,
)
from harness.training import NumericalAbort, cmd_eval, cmd_train

# Set up the root logger according to the configuration.
logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_ABORT = 3

COMMANDS = ("train", "eval", "ablate-correction", "sequence-reuse", "correlation-study", "bench-solvers")
# Commands that score a trained model; without --checkpoint they train one first.
NEEDS_MODEL = ("eval", "sequence-reuse", "correlation-study")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deqflow",
        description="Deep-equilibrium optical flow: training, evaluation and the solver/gradient experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON experiment config (defaults when omitted)")
        p.add_argument("--out", default=None, help=f"Output directory (default: {config.OUTPUT_DIR}/{name})")
        p.add_argument("--seed", type=int, default=None, help="Overrides data.seed")
        p.add_argument(
            "--override", action="append", default=[], metavar="KEY.PATH=VALUE",
            help="Config override, repeatable (e.g. --override correction.freq=2)",
        )
        if name in NEEDS_MODEL:
            p.add_argument("--checkpoint", default=None, help="Checkpoint directory written by 'train'")
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, args.override, args.seed)
    out_dir = args.out or os.path.join(config.OUTPUT_DIR, args.command)
    logger.info(f"Running '{args.command}' (seed {cfg.data.seed}) into {out_dir}")

    if args.command == "train":
        cmd_train(cfg, out_dir)
    elif args.command == "eval":
        checkpoint = args.checkpoint
        if checkpoint is None:
            checkpoint = cmd_train(cfg, os.path.join(out_dir, "train")).checkpoint
        cmd_eval(cfg, checkpoint, out_dir)
    elif args.command == "ablate-correction":
        cmd_ablate_correction(cfg, out_dir)
    elif args.command == "sequence-reuse":
        cmd_sequence_reuse(cfg, out_dir, args.checkpoint)
    elif args.command == "correlation-study":
        cmd_correlation_study(cfg, out_dir, args.checkpoint)
    elif args.command == "bench-solvers":
        cmd_bench_solvers(cfg, out_dir)
    logger.info(f"'{args.command}' finished; outputs in {out_dir}")


def run() -> None:
    """Console entry point: maps configuration errors and numerical aborts to exit codes."""
    try:
        main()
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        sys.exit(EXIT_CONFIG_ERROR)
    except NumericalAbort as e:
        logger.critical(f"Training aborted: {e}")
        sys.exit(EXIT_NUMERICAL_ABORT)
    except KeyboardInterrupt:
        logger.info("Interrupted. Logs are complete up to the last flush.")
        sys.exit(130)


if __name__ == "__main__":
    run()
