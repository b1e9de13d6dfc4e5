"""
Single-run orchestration: seed streams, warm-up, the act/learn loop with action
repeat, periodic deterministic evaluation and the per-run CSV log.
"""

import csv
import logging
import math
import threading
import time
import traceback
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from config import Config
from flare.services.augment import TranslateSpec
from flare.services.dqn import DqnAgent
from flare.services.envs import Env, make_env
from flare.services.flare_core import Representation
from flare.services.nn import EncoderSpec, load_checkpoint
from flare.services.replay import FrameHistory, LearnerStreams, ReplayBuffer, Transition
from flare.services.run_config import RunConfig, parse_run_config
from flare.services.sac import SacAgent
from flare.utils.errors import ConfigurationError, NonFiniteLossError, TrainingAborted

logger = logging.getLogger(__name__)

# evaluation episodes are seeded from here upwards; training resets draw below it
EVAL_SEED_OFFSET = 2 ** 31
RUNLOG_COLUMNS = (
    "env_step", "episode_return", "eval_return_mean", "eval_return_std",
    "critic_loss", "actor_loss", "alpha", "wall_time",
)

Agent = SacAgent | DqnAgent


# ---------------------------------------------------------------------------
# Seeds

@dataclass
class RunStreams:
    train_env: np.random.Generator
    eval_seed_base: int
    init_seed: int
    learner: LearnerStreams


def derive_streams(seed: int) -> RunStreams:
    """Independent streams for training resets, evaluation, augmentation, replay, exploration and torch"""
    root = np.random.SeedSequence(int(seed))
    env_seq, eval_seq, augment_seq, replay_seq, explore_seq, torch_seq = root.spawn(6)
    init_seed, noise_seed = (int(v) for v in torch_seq.generate_state(2, dtype=np.uint32))
    eval_base = EVAL_SEED_OFFSET + int(eval_seq.generate_state(1, dtype=np.uint32)[0]) % 2 ** 30
    return RunStreams(
        train_env=np.random.default_rng(env_seq),
        eval_seed_base=eval_base,
        init_seed=init_seed,
        learner=LearnerStreams(
            replay=np.random.default_rng(replay_seq),
            augment=np.random.default_rng(augment_seq),
            explore=np.random.default_rng(explore_seq),
            noise=torch.Generator().manual_seed(noise_seed),
        ),
    )


# ---------------------------------------------------------------------------
# Run log

@dataclass
class RunRecord:
    env_step: int
    episode_return: float | None = None
    eval_return_mean: float | None = None
    eval_return_std: float | None = None
    critic_loss: float | None = None
    actor_loss: float | None = None
    alpha: float | None = None
    wall_time: float | None = None


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def _parse_cell(text: str, integer: bool = False):
    if text == "":
        return None
    return int(text) if integer else float(text)


class RunLog:
    """Append-only evaluation-point records of one (config, seed) run"""

    def __init__(self, name: str = "run", seed: int = 0, records: Sequence[RunRecord] = ()):
        self.name = name
        self.seed = seed
        self.records: list[RunRecord] = []
        for record in records:
            self.append(record)

    def __len__(self):
        return len(self.records)

    def append(self, record: RunRecord) -> None:
        if self.records and record.env_step < self.records[-1].env_step:
            raise ConfigurationError(
                f"RunLog env_step must be monotone: {record.env_step} after {self.records[-1].env_step}"
            )
        self.records.append(record)

    def eval_points(self) -> tuple[np.ndarray, np.ndarray]:
        rows = [(r.env_step, r.eval_return_mean) for r in self.records if r.eval_return_mean is not None]
        steps = np.array([s for s, _ in rows], dtype=np.float64)
        values = np.array([v for _, v in rows], dtype=np.float64)
        return steps, values

    def final_eval(self) -> float | None:
        _, values = self.eval_points()
        return float(values[-1]) if len(values) else None

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(RUNLOG_COLUMNS)
            for record in self.records:
                writer.writerow([_format_cell(v) for v in astuple(record)])
        return path

    @staticmethod
    def is_run_log(path: str | Path) -> bool:
        with Path(path).open("r", newline="", encoding="utf-8") as f:
            return tuple(next(csv.reader(f), ())) == RUNLOG_COLUMNS

    @classmethod
    def read_csv(cls, path: str | Path, name: str | None = None, seed: int = 0) -> "RunLog":
        path = Path(path)
        with path.open("r", newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = tuple(next(reader, ()))
            if header != RUNLOG_COLUMNS:
                raise ConfigurationError(f"{path} is not a run log (header {header})")
            records = []
            for row in reader:
                values = [_parse_cell(cell, integer=(i == 0)) for i, cell in enumerate(row)]
                records.append(RunRecord(*values))
        return cls(name or path.stem, seed, records)


# ---------------------------------------------------------------------------
# Construction

def build_representation_for(config: RunConfig, env: Env) -> Representation:
    obs_shape = env.observation_space.shape
    encoder = EncoderSpec()
    if config.mode.is_pixel:
        size = config.encoder_frame_size
        obs_shape = (obs_shape[0], size, size)
        e = config.encoder
        encoder = EncoderSpec(
            in_channels=obs_shape[0], frame_size=size, num_layers=e.num_layers, filters=e.filters,
            kernel_size=e.kernel_size, first_stride=e.first_stride, latent_dim=e.latent_dim,
            nonlinearity=e.nonlinearity,
        )
    return Representation(config.mode, config.n_frames, obs_shape, encoder,
                          config.encoder.head_width, config.encoder.ln_eps)


def translate_spec_for(config: RunConfig) -> TranslateSpec | None:
    if not config.uses_augmentation:
        return None
    size = config.env.resolved_frame_size
    return TranslateSpec(size, size + config.augment.pad, config.augment.pad_value)


def build_agent(config: RunConfig, env: Env, init_seed: int) -> Agent:
    representation = build_representation_for(config, env)
    augment = translate_spec_for(config)
    dtype = getattr(torch, config.dtype)
    if config.learner == "sac":
        return SacAgent(representation, env.action_dim, config.sac, config.optim, init_seed, augment, dtype)
    return DqnAgent(representation, env.num_actions, config.dqn, init_seed, augment, dtype, config.total_steps)


def random_action(env: Env, rng: np.random.Generator):
    if env.discrete:
        return int(rng.integers(0, env.num_actions))
    return rng.uniform(-1.0, 1.0, size=env.action_dim).astype(np.float32)


# ---------------------------------------------------------------------------
# Evaluation

def evaluate_episodes(agent: Agent, env: Env, episodes: int = 10, seed_base: int = EVAL_SEED_OFFSET,
                      n_frames: int = 1, action_repeat: int = 1, quantize: bool = False) -> list[float]:
    """Per-episode returns of the deterministic policy"""
    returns = []
    history = FrameHistory(n_frames, quantize)
    for episode in range(episodes):
        observation, _ = env.reset(seed=seed_base + episode)
        window = history.reset(observation)
        total, done = 0.0, False
        while not done:
            action = agent.act(window, deterministic=True)
            for _ in range(action_repeat):
                result = env.step(action)
                total += result.reward
                if result.done:
                    done = True
                    break
            window = history.push(result.observation)
        returns.append(total)
    return returns


def evaluate(agent: Agent, env: Env, episodes: int = 10, seed_base: int = EVAL_SEED_OFFSET,
             n_frames: int = 1, action_repeat: int = 1, quantize: bool = False) -> tuple[float, float]:
    returns = evaluate_episodes(agent, env, episodes, seed_base, n_frames, action_repeat, quantize)
    return float(np.mean(returns)), float(np.std(returns))


# ---------------------------------------------------------------------------
# Training

def run_training(config: RunConfig, seed: int, output_dir: str | Path | None = None,
                 stop_event: threading.Event | None = None,
                 record_wall_time: bool | None = None) -> RunLog:
    """Train one (config, seed) pair; the CSV log and final checkpoint go to output_dir"""
    if record_wall_time is None:
        record_wall_time = Config.RECORD_WALL_TIME
    output_dir = Path(output_dir) if output_dir is not None else None
    streams = derive_streams(seed)
    observation_mode = config.mode.observation_mode
    env = make_env(config.env, observation_mode)
    eval_env = make_env(config.env, observation_mode)
    agent = build_agent(config, env, streams.init_seed)
    quantize = config.mode.is_pixel
    buffer = ReplayBuffer(config.replay_capacity, env.observation_space.shape, (env.action_dim,),
                          discrete=env.discrete, quantize=quantize)
    history = FrameHistory(config.n_frames, quantize)
    log = RunLog(config.name, seed)
    logger.info(f"Run {config.name} seed {seed}: {config.mode.value} n={config.n_frames} "
                f"learner={config.learner} params={sum(agent.parameter_count().values())}")

    started = time.perf_counter()
    episode_id = 0
    observation, _ = env.reset(seed=int(streams.train_env.integers(0, EVAL_SEED_OFFSET)))
    window = history.reset(observation)
    episode_return, last_return = 0.0, None
    metrics: dict = {}
    env_step = 0
    next_eval = config.eval_interval

    while env_step < config.total_steps:
        if stop_event is not None and stop_event.is_set():
            raise TrainingAborted(f"stop requested at env step {env_step}")

        if isinstance(agent, DqnAgent):
            agent.set_progress(env_step)
        if env_step < config.initial_steps:
            action = random_action(env, streams.learner.explore)
        else:
            action = agent.act(window, deterministic=False, streams=streams.learner)

        reward = 0.0
        for _ in range(config.action_repeat):
            result = env.step(action)
            reward += result.reward
            env_step += 1
            if result.done:
                break
        buffer.push(Transition(observation, action, reward, result.observation, result.terminated, episode_id))
        episode_return += reward
        observation = result.observation
        window = history.push(observation)

        if env_step >= config.initial_steps:
            try:
                metrics = agent.update(buffer, streams.learner)
            except NonFiniteLossError as e:
                snapshot = None
                if output_dir is not None:
                    snapshot = str(agent.save(output_dir / "diagnostic.pt", config=config.model_dump(mode="json"),
                                              seed=seed, env_step=env_step, error=str(e)))
                logger.error(f"Non-finite loss at env step {env_step}: {e}")
                logger.error(traceback.format_exc())
                raise TrainingAborted(str(e), snapshot) from e

        if result.done:
            last_return = episode_return
            episode_id += 1
            episode_return = 0.0
            observation, _ = env.reset(seed=int(streams.train_env.integers(0, EVAL_SEED_OFFSET)))
            window = history.reset(observation)

        if env_step >= next_eval or env_step >= config.total_steps:
            mean, std = evaluate(agent, eval_env, config.eval_episodes, streams.eval_seed_base,
                                 config.n_frames, config.action_repeat, quantize)
            log.append(RunRecord(
                env_step=env_step,
                episode_return=last_return,
                eval_return_mean=mean,
                eval_return_std=std,
                critic_loss=metrics.get("critic_loss"),
                actor_loss=metrics.get("actor_loss"),
                alpha=metrics.get("alpha"),
                wall_time=time.perf_counter() - started if record_wall_time else None,
            ))
            logger.info(f"{config.name} seed {seed} step {env_step}: eval {mean:.2f} ± {std:.2f}")
            while next_eval <= env_step:
                next_eval += config.eval_interval

    if output_dir is not None:
        log.write_csv(output_dir / f"{config.name}_seed{seed}.csv")
        agent.save(output_dir / f"{config.name}_seed{seed}.pt", config=config.model_dump(mode="json"),
                   seed=seed, env_step=env_step)
    return log


def evaluate_checkpoint(path: str | Path, episodes: int = 10) -> tuple[float, float]:
    """Rebuild the agent recorded in a checkpoint and evaluate its deterministic policy"""
    metadata = load_checkpoint(path)["metadata"]
    if "config" not in metadata:
        raise ConfigurationError(f"Checkpoint {path} carries no run config")
    config = parse_run_config(metadata["config"])
    streams = derive_streams(int(metadata.get("seed", 0)))
    env = make_env(config.env, config.mode.observation_mode)
    agent = build_agent(config, env, streams.init_seed)
    agent.load(path, with_optimizers=False)
    mean, std = evaluate(agent, env, episodes, streams.eval_seed_base, config.n_frames, config.action_repeat,
                         config.mode.is_pixel)
    if not math.isfinite(mean):
        raise ConfigurationError(f"Evaluation of {path} produced a non-finite return")
    return mean, std
