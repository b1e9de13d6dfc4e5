"""
Plain DQN with a hard-copied target network, on top of a flare representation.
"""

import logging
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from flare.services.augment import TranslateSpec, center_translate, translate_windows
from flare.services.flare_core import Representation, representation_parameter_count
from flare.services.nn import (
    OptimState,
    ParamSet,
    adam_step,
    backward,
    clone_params,
    copy_params_,
    count_parameters,
    init_mlp,
    load_checkpoint,
    mlp_forward,
    restore_params_,
    save_checkpoint,
)
from flare.services.replay import LearnerStreams, ReplayBuffer
from flare.services.run_config import DqnHyper
from flare.utils.errors import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class QNets:
    representation: Representation
    num_actions: int
    online: ParamSet
    target: ParamSet


def init_q_nets(representation: Representation, num_actions: int, hyper: DqnHyper,
                generator: torch.Generator, dtype: torch.dtype = torch.float32) -> QNets:
    online = representation.init_params(generator, dtype)
    hidden = [hyper.hidden_dim] * hyper.num_layers
    online.update(init_mlp("q", [representation.feature_dim, *hidden, num_actions], generator, dtype))
    return QNets(representation, num_actions, online, clone_params(online, requires_grad=False))


def q_values(params: ParamSet, feature: torch.Tensor) -> torch.Tensor:
    """One value per discrete action"""
    return mlp_forward(params, feature, "q")


def q_loss(params: ParamSet, features: torch.Tensor, actions: torch.Tensor, rewards: torch.Tensor,
           dones: torch.Tensor, next_target_q: torch.Tensor, gamma: float) -> torch.Tensor:
    """MSE between Q(o, a) and r + gamma * (1 - done) * max_a' Q_target(o', a')"""
    target = (rewards + gamma * (1.0 - dones) * next_target_q.max(dim=-1).values).detach()
    chosen = q_values(params, features).gather(-1, actions.long().reshape(-1, 1)).squeeze(-1)
    return F.mse_loss(chosen, target)


def epsilon_greedy(q, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform action with probability epsilon, else argmax (ties go to the lowest index)"""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    values = np.asarray(q.detach().cpu() if isinstance(q, torch.Tensor) else q, dtype=np.float64).reshape(-1)
    if rng.random() < epsilon:
        return int(rng.integers(0, values.shape[0]))
    return int(np.argmax(values))


def linear_epsilon(step: int, total_steps: int, start: float = 1.0, end: float = 0.05,
                   fraction: float = 0.2) -> float:
    horizon = max(1.0, fraction * total_steps)
    progress = min(1.0, max(0.0, step / horizon))
    return start + progress * (end - start)


def dqn_train_step(nets: QNets, optim: OptimState, buffer: ReplayBuffer, hyper: DqnHyper,
                   streams: LearnerStreams, step: int, augment: TranslateSpec | None = None,
                   dtype: torch.dtype = torch.float32) -> tuple[QNets, dict[str, float]]:
    rep = nets.representation
    batch = buffer.sample(hyper.batch_size, rep.n_frames, streams.replay)
    batch.obs, batch.next_obs = translate_windows(batch.obs, batch.next_obs, augment, streams.augment)
    tensors = batch.to_tensors(dtype)

    with torch.no_grad():
        next_target_q = q_values(nets.target, rep(nets.target, tensors.next_obs))

    def objective(params):
        features = rep(params, tensors.obs)
        return q_loss(params, features, tensors.actions, tensors.rewards, tensors.dones, next_target_q, hyper.gamma)

    loss, grads = backward(objective, nets.online, path="dqn/q_loss")
    adam_step(nets.online, grads, optim)

    if step % hyper.target_update_interval == 0:
        copy_params_(nets.target, nets.online)
        logger.debug(f"dqn step {step}: target network synced")

    return nets, {"step": step, "critic_loss": loss, "batch_reward_mean": float(tensors.rewards.mean())}


def q_parameter_count(representation: Representation, num_actions: int, hyper: DqnHyper) -> int:
    sizes = [representation.feature_dim, *([hyper.hidden_dim] * hyper.num_layers), num_actions]
    head = sum((n_in + 1) * n_out for n_in, n_out in zip(sizes[:-1], sizes[1:]))
    return representation_parameter_count(representation) + head


def parity_head_width(representation: Representation, num_actions: int, hyper: DqnHyper, target_count: int,
                      widths: range = range(16, 4097, 16)) -> int:
    """Fusion-head width whose total online parameter count lands closest to target_count"""
    best, best_gap = None, None
    for width in widths:
        candidate = Representation(representation.mode, representation.n_frames, representation.obs_shape,
                                   representation.encoder, width, representation.ln_eps)
        gap = abs(q_parameter_count(candidate, num_actions, hyper) - target_count)
        if best_gap is None or gap < best_gap:
            best, best_gap = width, gap
    return best


class DqnAgent:
    kind = "dqn"

    def __init__(self, representation: Representation, num_actions: int, hyper: DqnHyper, seed: int = 0,
                 augment: TranslateSpec | None = None, dtype: torch.dtype = torch.float32,
                 total_steps: int = 1):
        self.representation = representation
        self.hyper = hyper
        self.augment = augment
        self.dtype = dtype
        self.total_steps = total_steps
        generator = torch.Generator().manual_seed(seed)
        self.nets = init_q_nets(representation, num_actions, hyper, generator, dtype)
        self.optim = OptimState(self.nets.online, hyper.lr, name="q")
        self.epsilon = hyper.epsilon_start
        self.updates = 0
        self._lock = threading.Lock()
        self._snapshot = clone_params(self.nets.online, requires_grad=False)

    def set_progress(self, env_step: int) -> float:
        h = self.hyper
        self.epsilon = linear_epsilon(env_step, self.total_steps, h.epsilon_start, h.epsilon_end, h.epsilon_fraction)
        return self.epsilon

    def prepare_window(self, window: np.ndarray) -> np.ndarray:
        if self.augment is None:
            return window
        placed, _ = center_translate(window, self.augment)
        return placed

    def refresh_snapshot(self) -> None:
        frozen = clone_params(self.nets.online, requires_grad=False)
        with self._lock:
            self._snapshot = frozen

    def act(self, window: np.ndarray, deterministic: bool = False,
            streams: LearnerStreams | None = None) -> int:
        with self._lock:
            params = self._snapshot
        with torch.no_grad():
            obs = torch.as_tensor(np.asarray(self.prepare_window(window)), dtype=self.dtype).unsqueeze(0)
            q = q_values(params, self.representation(params, obs))[0]
        if deterministic or streams is None:
            return int(torch.argmax(q))
        return epsilon_greedy(q, self.epsilon, streams.explore)

    def update(self, buffer: ReplayBuffer, streams: LearnerStreams) -> dict[str, float]:
        self.updates += 1
        _, metrics = dqn_train_step(self.nets, self.optim, buffer, self.hyper, streams, self.updates,
                                    self.augment, self.dtype)
        self.refresh_snapshot()
        metrics["epsilon"] = self.epsilon
        return metrics

    def parameter_count(self) -> dict[str, int]:
        return {"online": count_parameters(self.nets.online), "target": count_parameters(self.nets.target)}

    def save(self, path: str | Path, **metadata) -> Path:
        return save_checkpoint(path, {"online": self.nets.online, "target": self.nets.target}, {"q": self.optim},
                               kind=self.kind, updates=self.updates, epsilon=self.epsilon, **metadata)

    def load(self, path: str | Path, with_optimizers: bool = True) -> dict:
        payload = load_checkpoint(path)
        if payload["metadata"].get("kind") != self.kind:
            raise CheckpointError(f"Checkpoint {path} holds a {payload['metadata'].get('kind')!r} agent, not dqn")
        restore_params_(self.nets.online, payload["params"]["online"])
        restore_params_(self.nets.target, payload["params"]["target"])
        if with_optimizers:
            self.optim.load_state_dict(payload["optim"]["q"])
        self.updates = int(payload["metadata"].get("updates", 0))
        self.epsilon = float(payload["metadata"].get("epsilon", self.epsilon))
        self.refresh_snapshot()
        return payload["metadata"]
