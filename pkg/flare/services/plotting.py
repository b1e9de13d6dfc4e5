"""Seed aggregation and SVG learning curves."""

import glob
import logging
import re
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from flare.services.harness import RunLog  # noqa: E402
from flare.utils.errors import ConfigurationError  # noqa: E402

logger = logging.getLogger(__name__)

FINAL_WINDOW = 3
_SEED_SUFFIX = re.compile(r"^(?P<variant>.+)_seed(?P<seed>\d+)$")

plt.rcParams["svg.hashsalt"] = "flare"
plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["figure.figsize"] = (6.0, 4.0)
plt.rcParams["font.size"] = 9


@dataclass
class AggregateCurve:
    variant: str
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_seeds: int

    @property
    def final_score(self) -> float:
        return final_window_score(self.mean)

    @property
    def auc(self) -> float:
        return area_under_curve(self.steps, self.mean)


def common_grid(logs: Sequence[RunLog]) -> np.ndarray:
    """Shared eval grid; mismatched grids fall back to the first log's points inside the overlap"""
    grids = [log.eval_points()[0] for log in logs]
    if any(len(g) == 0 for g in grids):
        raise ConfigurationError("Every log needs at least one evaluation point")
    if all(len(g) == len(grids[0]) and np.array_equal(g, grids[0]) for g in grids):
        return grids[0]
    low = max(g[0] for g in grids)
    high = min(g[-1] for g in grids)
    if low > high:
        raise ConfigurationError(f"Evaluation grids do not overlap ({low} > {high})")
    grid = grids[0][(grids[0] >= low) & (grids[0] <= high)]
    logger.info(f"Eval grids differ; resampling {len(logs)} logs onto {len(grid)} points by linear interpolation")
    return grid


def aggregate_curves(logs: Sequence[RunLog], variant: str = "") -> AggregateCurve:
    """Mean and population std over seeds at common eval points"""
    if not logs:
        raise ConfigurationError("aggregate_curves needs at least one log")
    grid = common_grid(logs)
    values = np.stack([np.interp(grid, *log.eval_points()) for log in logs])
    return AggregateCurve(variant or logs[0].name, grid, values.mean(axis=0), values.std(axis=0), len(logs))


def final_window_score(values: Sequence[float], window: int = FINAL_WINDOW) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ConfigurationError("final_window_score needs at least one value")
    return float(values[-window:].mean())


def area_under_curve(steps: Sequence[float], values: Sequence[float]) -> float:
    """Trapezoid rule over environment steps"""
    steps = np.asarray(steps, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if steps.size < 2:
        return 0.0
    return float(np.trapezoid(values, steps))


def load_logs(patterns: Sequence[str]) -> dict[str, list[RunLog]]:
    """
    Expand globs and group run logs by variant (file stem without the _seed<k> suffix).

    CSVs with another header, such as a suite's summary.csv and verdicts.csv, are skipped.
    """
    paths = sorted({Path(p) for pattern in patterns for p in glob.glob(pattern)})
    grouped: dict[str, list[RunLog]] = defaultdict(list)
    for path in paths:
        if not RunLog.is_run_log(path):
            logger.debug(f"Skipping {path}: not a run log")
            continue
        match = _SEED_SUFFIX.match(path.stem)
        variant, seed = (match["variant"], int(match["seed"])) if match else (path.stem, 0)
        grouped[variant].append(RunLog.read_csv(path, variant, seed))
    if not grouped:
        raise ConfigurationError(f"No run logs match {list(patterns)}")
    return dict(grouped)


def plot_curves(logs: Mapping[str, Sequence[RunLog]], output_path: str | Path,
                title: str | None = None) -> list[AggregateCurve]:
    """Per-variant mean line with a shaded +-1 std band; deterministic SVG for fixed inputs"""
    if not logs:
        raise ConfigurationError("plot_curves needs at least one log")
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    curves = [aggregate_curves(runs, variant) for variant, runs in logs.items()]
    fig, ax = plt.subplots()
    for curve in curves:
        line, = ax.plot(curve.steps, curve.mean, label=f"{curve.variant} (n={curve.n_seeds})", linewidth=1.5)
        ax.fill_between(curve.steps, curve.mean - curve.std, curve.mean + curve.std,
                        color=line.get_color(), alpha=0.2, linewidth=0)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return")
    if title:
        ax.set_title(title)
    ax.legend(loc="best", frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(output_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Learning curves written to {output_path}")
    return curves
