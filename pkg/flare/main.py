import argparse
import logging
import threading
from typing import Sequence

from config import Config
from flare.handlers.command_handler import CommandHandler
from flare.services.registry import RunRegistry
from flare.services.suites import SUITE_IDS

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flare", description="Flare reinforcement-learning experiments")
    parser.add_argument("--output-root", default=None, help="overrides FLARE_OUTPUT_ROOT")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train one (config, seed) run")
    train.add_argument("--config", required=True, help="YAML run config")
    train.add_argument("--seed", type=int, default=0)

    suite = commands.add_parser("suite", help="run a preset multi-seed suite")
    suite.add_argument("--name", required=True, choices=SUITE_IDS)
    suite.add_argument("--seeds", default=None, help="e.g. 0,1,2 or 0-4 (defaults to the preset seeds)")
    suite.add_argument("--workers", type=int, default=None, help="parallel runs (defaults to FLARE_WORKERS)")
    suite.add_argument("--total-steps", type=int, default=None, help="shorten every run (smoke tests)")

    plot = commands.add_parser("plot", help="plot learning curves from run logs")
    plot.add_argument("--inputs", nargs="+", required=True, help="CSV globs")
    plot.add_argument("--out", required=True, help="SVG output path")
    plot.add_argument("--title", default=None)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--episodes", type=int, default=10)
    return parser


def dispatch(argv: Sequence[str] | None = None, stop_event: threading.Event | None = None,
             registry: RunRegistry | None = None) -> int:
    args = build_parser().parse_args(argv)
    command_handler = CommandHandler(registry or RunRegistry(Config.DB_PATH), stop_event)

    # Register command handlers
    handlers = {
        "train": command_handler.handle_train_command,
        "suite": command_handler.handle_suite_command,
        "plot": command_handler.handle_plot_command,
        "eval": command_handler.handle_eval_command,
    }
    logger.debug(f"Dispatching {args.command}")
    return handlers[args.command](args)
