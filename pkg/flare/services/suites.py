"""
Multi-seed suites: preset variants, parallel execution, aggregation and
ordering verdicts.

A suite file under configs/suites/ includes a base run config and lists its
variants as override mappings:

    include: [../base_state.yaml]
    variants:
      StateFull: {mode: StateFull, n_frames: 1}
      StateFlare: {mode: StateFlare, n_frames: 4}
"""

import asyncio
import csv
import logging
import threading
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from config import Config
from flare.services.dqn import parity_head_width, q_parameter_count
from flare.services.envs import make_env
from flare.services.harness import RunLog, build_representation_for, run_training
from flare.services.plotting import AggregateCurve, aggregate_curves, final_window_score, plot_curves
from flare.services.registry import RunRegistry
from flare.services.run_config import (
    DqnHyper,
    RunConfig,
    SacHyper,
    deep_merge,
    load_config_document,
    parse_run_config,
)
from flare.utils.errors import ConfigurationError
from flare.utils.logging_config import run_context, suite_log

logger = logging.getLogger(__name__)

SUITE_IDS = (
    "motivation", "state_ablation", "pixel_main", "pixel_ablation_flow",
    "pixel_ablation_stack", "pixel_ablation_frames", "discrete",
)
PARITY_TOLERANCE = 0.10


@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str


@dataclass
class SuitePlan:
    suite: str
    variants: dict[str, RunConfig]
    parameter_counts: dict[str, int] = field(default_factory=dict)


@dataclass
class SuiteResult:
    suite: str
    curves: dict[str, AggregateCurve]
    scores: dict[str, float]
    score_stds: dict[str, float]
    aucs: dict[str, float]
    verdicts: list[Verdict]
    failed: list[str]
    output_dir: Path

    @property
    def complete(self) -> bool:
        return not self.failed


# ---------------------------------------------------------------------------
# Presets

def load_suite(suite: str, config_dir: str | Path | None = None,
               overrides: dict[str, Any] | None = None) -> SuitePlan:
    """Resolve a suite file into one validated RunConfig per variant"""
    if suite not in SUITE_IDS:
        raise ConfigurationError(f"Unknown suite {suite!r}; expected one of {SUITE_IDS}")
    path = Path(config_dir or Config.CONFIG_DIR) / "suites" / f"{suite}.yaml"
    document = load_config_document(path)
    variants = document.pop("variants", None)
    parity = document.pop("parity", None)
    if not variants:
        raise ConfigurationError(f"Suite file {path} lists no variants")

    configs = {}
    for name, variant in variants.items():
        merged = deep_merge(document, variant or {})
        if overrides:
            merged = _shorten(deep_merge(merged, overrides), overrides)
        merged["name"] = name
        configs[name] = parse_run_config(merged)

    plan = SuitePlan(suite, configs)
    if parity:
        apply_capacity_parity(plan, parity["reference"], parity["adjust"])
    return plan


def _shorten(document: dict, overrides: dict[str, Any]) -> dict:
    """
    A bare total_steps override also pulls warm-up and eval spacing inside the
    shorter run. The warm-up never drops below one learner batch of transitions;
    a run too short for that is left for RunConfig validation to reject.
    """
    total = overrides.get("total_steps")
    if total is None:
        return document
    if "initial_steps" not in overrides and document.get("initial_steps", 0) > total // 2:
        learner = document.get("learner", "sac")
        hyper = SacHyper if learner == "sac" else DqnHyper
        batch = document.get(learner, {}).get("batch_size", hyper.model_fields["batch_size"].default)
        repeat = document.get("action_repeat", RunConfig.model_fields["action_repeat"].default)
        document["initial_steps"] = min(total, max(total // 2, batch * repeat))
    if "eval_interval" not in overrides and document.get("eval_interval", 1) > total:
        document["eval_interval"] = max(1, total // 4)
    return document


def apply_capacity_parity(plan: SuitePlan, reference: str, adjust: Sequence[str]) -> dict[str, int]:
    """Resize the fusion head of each adjusted Q-learner so its parameter count tracks the reference"""
    def count(config: RunConfig) -> int:
        env = make_env(config.env, config.mode.observation_mode)
        return q_parameter_count(build_representation_for(config, env), env.num_actions, config.dqn)

    base = plan.variants[reference]
    if base.learner != "dqn":
        raise ConfigurationError("Capacity parity is defined for dqn variants only")
    target = count(base)
    plan.parameter_counts[reference] = target
    for name in adjust:
        config = plan.variants[name]
        env = make_env(config.env, config.mode.observation_mode)
        width = parity_head_width(build_representation_for(config, env), env.num_actions, config.dqn, target)
        config = config.model_copy(update={"encoder": config.encoder.model_copy(update={"head_width": width})})
        plan.variants[name] = config
        plan.parameter_counts[name] = count(config)
        gap = abs(plan.parameter_counts[name] - target) / target
        level = logging.INFO if gap <= PARITY_TOLERANCE else logging.WARNING
        logger.log(level, f"Capacity parity: {name} head width {width}, "
                          f"{plan.parameter_counts[name]} vs {target} parameters ({gap:.1%})")
    return plan.parameter_counts


# ---------------------------------------------------------------------------
# Verdicts

def _missing(scores: dict[str, float], *names: str) -> list[str]:
    return [n for n in names if n not in scores]


def _margin_verdict(name: str, scores: dict[str, float], better: str, worse: str, reference: str,
                    fraction: float) -> Verdict:
    missing = _missing(scores, better, worse, reference)
    if missing:
        return Verdict(name, False, f"missing variants {missing}")
    gap = scores[better] - scores[worse]
    need = fraction * scores[reference]
    return Verdict(name, gap >= need and gap > 0,
                   f"{better} - {worse} = {gap:.2f}, required >= {need:.2f} ({fraction:.0%} of {reference})")


def motivation_verdicts(scores, aucs) -> list[Verdict]:
    verdicts = [_margin_verdict("flare_beats_position_only", scores, "StateFlare", "StatePositionOnly",
                                "StateFull", 0.25)]
    missing = _missing(scores, "StateFull", "StateFlare")
    if missing:
        verdicts.append(Verdict("full_state_upper_bound", False, f"missing variants {missing}"))
    else:
        verdicts.append(Verdict("full_state_upper_bound", scores["StateFull"] >= scores["StateFlare"],
                                f"StateFull {scores['StateFull']:.2f} vs StateFlare {scores['StateFlare']:.2f}"))
    return verdicts


def state_ablation_verdicts(scores, aucs) -> list[Verdict]:
    missing = _missing(scores, "StateFull", "StateFlare", "StateStack", "StateRecurrent")
    if missing:
        return [Verdict("flare_beats_history_baselines", False, f"missing variants {missing}")]
    flare = scores["StateFlare"]
    gaps = [flare - scores["StateStack"], flare - scores["StateRecurrent"]]
    need = 0.15 * scores["StateFull"]
    passed = min(gaps) >= 0 and max(gaps) >= need
    return [Verdict("flare_beats_history_baselines", passed,
                    f"gaps stack {gaps[0]:.2f}, recurrent {gaps[1]:.2f}; largest must reach {need:.2f}")]


def pixel_main_verdicts(scores, aucs) -> list[Verdict]:
    return [_margin_verdict("flow_beats_latent_stack", scores, "FlarePixel", "LatentConcatPixel",
                            "StateFull", 0.15)]


def pixel_flow_verdicts(scores, aucs) -> list[Verdict]:
    missing = _missing(aucs, "FlarePixel", "PixelFlow")
    if missing:
        return [Verdict("latent_flow_auc", False, f"missing variants {missing}")]
    return [Verdict("latent_flow_auc", aucs["FlarePixel"] >= aucs["PixelFlow"],
                    f"AUC FlarePixel {aucs['FlarePixel']:.1f} vs PixelFlow {aucs['PixelFlow']:.1f}")]


def pixel_frames_verdicts(scores, aucs) -> list[Verdict]:
    missing = _missing(scores, "FlarePixel_n2", "FlarePixel_n5")
    if missing:
        return [Verdict("two_frames_suffice", False, f"missing variants {missing}")]
    return [Verdict("two_frames_suffice", scores["FlarePixel_n2"] >= scores["FlarePixel_n5"],
                    f"n=2 {scores['FlarePixel_n2']:.2f} vs n=5 {scores['FlarePixel_n5']:.2f}")]


def discrete_verdicts(scores, aucs) -> list[Verdict]:
    missing = _missing(scores, "FlareDQN", "SingleFrameDQN")
    if missing:
        return [Verdict("flare_dqn_catch_rate", False, f"missing variants {missing}")]
    gap = scores["FlareDQN"] - scores["SingleFrameDQN"]
    return [Verdict("flare_dqn_catch_rate", gap >= 0.20,
                    f"catch rate gap {gap:.3f}, required >= 0.200")]


VERDICTS: dict[str, Callable[[dict, dict], list[Verdict]]] = {
    "motivation": motivation_verdicts,
    "state_ablation": state_ablation_verdicts,
    "pixel_main": pixel_main_verdicts,
    "pixel_ablation_flow": pixel_flow_verdicts,
    "pixel_ablation_stack": pixel_main_verdicts,
    "pixel_ablation_frames": pixel_frames_verdicts,
    "discrete": discrete_verdicts,
}


# ---------------------------------------------------------------------------
# Execution

def _run_job(config_document: dict, seed: int, output_dir: str, run_id: str) -> str:
    """Worker entry point; returns the CSV path of the finished run"""
    torch.set_num_threads(Config.TORCH_THREADS)
    config = parse_run_config(config_document)
    with run_context(run_id):
        run_training(config, seed, output_dir)
    return str(Path(output_dir) / f"{config.name}_seed{seed}.csv")


async def _run_parallel(suite: str, jobs: list[tuple[str, RunConfig, int]], output_dir: Path, workers: int) -> list:
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            loop.run_in_executor(pool, _run_job, config.model_dump(mode="json"), seed, str(output_dir),
                                 f"{suite}/{variant}/seed{seed}")
            for variant, config, seed in jobs
        ]
        return await asyncio.gather(*futures, return_exceptions=True)


def _run_sequential(suite: str, jobs: list[tuple[str, RunConfig, int]], output_dir: Path,
                    stop_event: threading.Event | None) -> list:
    outcomes = []
    for variant, config, seed in jobs:
        try:
            with run_context(f"{suite}/{variant}/seed{seed}"):
                run_training(config, seed, output_dir, stop_event)
            outcomes.append(str(output_dir / f"{config.name}_seed{seed}.csv"))
        except Exception as e:
            logger.error(f"Run {variant} seed {seed} failed: {e}")
            logger.error(traceback.format_exc())
            outcomes.append(e)
    return outcomes


def write_summary(result: SuiteResult, parameter_counts: dict[str, int]) -> tuple[Path, Path]:
    summary = result.output_dir / "summary.csv"
    with summary.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["variant", "seeds", "final_mean", "final_std", "auc", "parameters"])
        for variant, curve in result.curves.items():
            writer.writerow([variant, curve.n_seeds, repr(result.scores[variant]), repr(result.score_stds[variant]),
                             repr(result.aucs[variant]), parameter_counts.get(variant, "")])
    verdicts = result.output_dir / "verdicts.csv"
    with verdicts.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["verdict", "passed", "detail"])
        for verdict in result.verdicts:
            writer.writerow([verdict.name, int(verdict.passed), verdict.detail])
    return summary, verdicts


def summarize(suite: str, logs: dict[str, list[RunLog]], output_dir: Path, failed: list[str]) -> SuiteResult:
    curves, scores, score_stds, aucs = {}, {}, {}, {}
    for variant, runs in logs.items():
        curve = aggregate_curves(runs, variant)
        per_seed = [final_window_score(np.interp(curve.steps, *run.eval_points())) for run in runs]
        curves[variant] = curve
        scores[variant] = curve.final_score
        score_stds[variant] = float(np.std(per_seed))
        aucs[variant] = curve.auc
    verdicts = VERDICTS[suite](scores, aucs)
    return SuiteResult(suite, curves, scores, score_stds, aucs, verdicts, failed, output_dir)


def run_suite(suite: str, seeds: Sequence[int] | None = None, output_root: str | Path | None = None,
              workers: int | None = None, registry: RunRegistry | None = None,
              stop_event: threading.Event | None = None, overrides: dict[str, Any] | None = None,
              config_dir: str | Path | None = None) -> SuiteResult:
    """Run every variant x seed, then aggregate, plot, summarize and judge the orderings"""
    plan = load_suite(suite, config_dir, overrides)
    workers = workers or Config.WORKERS
    output_dir = Path(Config.get_output_root(str(output_root) if output_root else None)) / suite
    output_dir.mkdir(parents=True, exist_ok=True)
    with suite_log(output_dir, suite):
        return _run_plan(suite, plan, seeds, output_dir, workers, registry, stop_event)


def _run_plan(suite: str, plan: SuitePlan, seeds: Sequence[int] | None, output_dir: Path, workers: int,
              registry: RunRegistry | None, stop_event: threading.Event | None) -> SuiteResult:
    jobs = []
    for variant, config in plan.variants.items():
        for seed in (seeds if seeds is not None else config.seeds):
            jobs.append((variant, config, int(seed)))
    logger.info(f"Suite {suite}: {len(plan.variants)} variants, {len(jobs)} runs, {workers} worker(s)")

    if registry is not None:
        for variant, config, seed in jobs:
            registry.start_run(f"{suite}/{variant}/seed{seed}", suite, variant, seed,
                               str(output_dir / f"{config.name}_seed{seed}.csv"))

    if workers > 1:
        outcomes = asyncio.run(_run_parallel(suite, jobs, output_dir, workers))
    else:
        outcomes = _run_sequential(suite, jobs, output_dir, stop_event)

    logs: dict[str, list[RunLog]] = {}
    failed = []
    for (variant, _, seed), outcome in zip(jobs, outcomes):
        run_id = f"{suite}/{variant}/seed{seed}"
        if isinstance(outcome, BaseException):
            failed.append(run_id)
            if workers > 1:
                logger.error(f"Run {run_id} failed: {outcome!r}")
            if registry is not None:
                registry.finish_run(run_id, "failed")
            continue
        log = RunLog.read_csv(outcome, variant, seed)
        logs.setdefault(variant, []).append(log)
        if registry is not None:
            registry.finish_run(run_id, "completed", log.final_eval())

    if not logs:
        raise ConfigurationError(f"Suite {suite}: every run failed, nothing to summarize")
    result = summarize(suite, logs, output_dir, failed)
    write_summary(result, plan.parameter_counts)
    plot_curves(logs, output_dir / "curves.svg", title=suite)
    if registry is not None:
        registry.set_metadata("last_suite", suite)

    status = "complete" if result.complete else f"INCOMPLETE ({len(failed)} failed runs)"
    logger.info(f"Suite {suite} {status}")
    for verdict in result.verdicts:
        logger.info(f"  {verdict.name}: {'PASS' if verdict.passed else 'FAIL'} - {verdict.detail}")
    return result
