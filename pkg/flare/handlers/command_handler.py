import logging
import threading
import traceback
from argparse import Namespace
from pathlib import Path

from config import Config
from flare.services.harness import evaluate_checkpoint, run_training
from flare.services.plotting import load_logs, plot_curves
from flare.services.registry import RunRegistry
from flare.services.run_config import dump_run_config, load_run_config
from flare.services.suites import run_suite
from flare.utils.errors import FlareError, TrainingAborted

logger = logging.getLogger(__name__)


def parse_seeds(text: str | None) -> list[int] | None:
    """'0,1,2' or '0-4' -> list of seeds"""
    if not text:
        return None
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            low, high = (int(v) for v in part.split("-", 1))
            seeds.extend(range(low, high + 1))
        elif part:
            seeds.append(int(part))
    return seeds


class CommandHandler:
    def __init__(self, registry: RunRegistry, stop_event: threading.Event | None = None):
        self.registry = registry
        self.stop_event = stop_event or threading.Event()

    def handle_train_command(self, args: Namespace) -> int:
        """Handle `train --config <file> --seed <n>`"""
        run_id = None
        try:
            config = load_run_config(args.config)
            output_dir = Path(Config.get_output_root(args.output_root)) / config.name
            dump_run_config(config, output_dir / "config.yaml")
            run_id = f"train/{config.name}/seed{args.seed}"
            self.registry.start_run(run_id, "train", config.name, args.seed,
                                    str(output_dir / f"{config.name}_seed{args.seed}.csv"))
            log = run_training(config, args.seed, output_dir, self.stop_event)
            final = log.final_eval()
            self.registry.finish_run(run_id, "completed", final)
            logger.info(f"Run {run_id} finished: final eval return {final}")
            return 0
        except TrainingAborted as e:
            logger.error(f"Run {run_id} aborted: {e}")
            if run_id:
                self.registry.finish_run(run_id, "aborted")
            return 2
        except FlareError as e:
            logger.error(f"Error in train command: {e}")
            logger.error(traceback.format_exc())
            if run_id:
                self.registry.finish_run(run_id, "failed")
            return 1

    def handle_suite_command(self, args: Namespace) -> int:
        """Handle `suite --name <id> --seeds <list>`"""
        try:
            overrides = {"total_steps": args.total_steps} if args.total_steps else None
            result = run_suite(args.name, parse_seeds(args.seeds), args.output_root, args.workers,
                               self.registry, self.stop_event, overrides)
            passed = sum(v.passed for v in result.verdicts)
            logger.info(f"Suite {args.name}: {passed}/{len(result.verdicts)} verdicts passed, "
                        f"outputs in {result.output_dir}")
            return 0 if result.complete else 3
        except FlareError as e:
            logger.error(f"Error in suite command: {e}")
            logger.error(traceback.format_exc())
            return 1

    def handle_plot_command(self, args: Namespace) -> int:
        """Handle `plot --inputs <globs> --out <file>`"""
        try:
            curves = plot_curves(load_logs(args.inputs), args.out, title=args.title)
            for curve in curves:
                logger.info(f"{curve.variant}: {curve.n_seeds} seeds, final {curve.final_score:.2f}")
            return 0
        except FlareError as e:
            logger.error(f"Error in plot command: {e}")
            return 1

    def handle_eval_command(self, args: Namespace) -> int:
        """Handle `eval --checkpoint <file> --episodes <n>`"""
        try:
            mean, std = evaluate_checkpoint(args.checkpoint, args.episodes)
            logger.info(f"Evaluation of {args.checkpoint} over {args.episodes} episodes: {mean:.2f} ± {std:.2f}")
            print(f"{mean},{std}")
            return 0
        except FlareError as e:
            logger.error(f"Error in eval command: {e}")
            logger.error(traceback.format_exc())
            return 1
