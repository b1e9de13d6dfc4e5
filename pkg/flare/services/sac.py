"""
Soft actor-critic over any flare representation.

Twin critics with EMA targets, a tanh-squashed Gaussian policy, and a learned
temperature. The critic loss trains the encoder (and fusion head); the actor
sees detached features.
"""

import logging
import math
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from flare.services.augment import TranslateSpec, center_translate, translate_windows
from flare.services.flare_core import Representation
from flare.services.nn import (
    OptimState,
    ParamSet,
    adam_step,
    backward,
    clone_params,
    count_parameters,
    init_mlp,
    load_checkpoint,
    mlp_forward,
    restore_params_,
    save_checkpoint,
    stop_gradient,
)
from flare.services.replay import LearnerStreams, ReplayBuffer
from flare.services.run_config import OptimConfig, SacHyper
from flare.utils.errors import CheckpointError, ConfigurationError, NonFiniteLossError

logger = logging.getLogger(__name__)

LOG_2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class ActorCritic:
    representation: Representation
    action_dim: int
    encoder: ParamSet
    encoder_target: ParamSet
    actor: ParamSet
    critic: ParamSet
    critic_target: ParamSet
    temperature: ParamSet
    log_std_bounds: tuple[float, float] = (-10.0, 2.0)

    @property
    def log_alpha(self) -> torch.Tensor:
        return self.temperature["log_alpha"]

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.detach().exp()

    def groups(self) -> dict[str, ParamSet]:
        return {
            "encoder": self.encoder,
            "encoder_target": self.encoder_target,
            "actor": self.actor,
            "critic": self.critic,
            "critic_target": self.critic_target,
            "temperature": self.temperature,
        }


def init_actor_critic(representation: Representation, action_dim: int, hyper: SacHyper,
                      generator: torch.Generator, dtype: torch.dtype = torch.float32) -> ActorCritic:
    feature_dim = representation.feature_dim
    hidden = [hyper.hidden_dim] * hyper.num_layers
    encoder = representation.init_params(generator, dtype)
    actor = init_mlp("actor", [feature_dim, *hidden, 2 * action_dim], generator, dtype)
    critic = init_mlp("critic.q1", [feature_dim + action_dim, *hidden, 1], generator, dtype)
    critic.update(init_mlp("critic.q2", [feature_dim + action_dim, *hidden, 1], generator, dtype))
    log_alpha = torch.tensor(math.log(hyper.init_temperature), dtype=dtype, requires_grad=True)
    return ActorCritic(
        representation=representation,
        action_dim=action_dim,
        encoder=encoder,
        encoder_target=clone_params(encoder, requires_grad=False),
        actor=actor,
        critic=critic,
        critic_target=clone_params(critic, requires_grad=False),
        temperature={"log_alpha": log_alpha},
        log_std_bounds=(hyper.log_std_min, hyper.log_std_max),
    )


# ---------------------------------------------------------------------------
# Policy

def policy_heads(actor_params: ParamSet, feature: torch.Tensor,
                 log_std_bounds: tuple[float, float] = (-10.0, 2.0)) -> tuple[torch.Tensor, torch.Tensor]:
    out = mlp_forward(actor_params, feature, "actor")
    mean, log_std = out.chunk(2, dim=-1)
    if not bool(torch.isfinite(out).all()):
        raise NonFiniteLossError("policy_heads", float("nan"))
    return mean, log_std.clamp(*log_std_bounds)


def squashed_log_prob(pre_tanh: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """log density of tanh(u), u ~ N(mean, exp(log_std)^2), summed over action dimensions"""
    z = (pre_tanh - mean) * torch.exp(-log_std)
    gaussian = -0.5 * z.pow(2) - log_std - HALF_LOG_2PI
    # log(1 - tanh(u)^2) in a form that stays finite for large |u|
    correction = 2.0 * (LOG_2 - pre_tanh - F.softplus(-2.0 * pre_tanh))
    return (gaussian - correction).sum(dim=-1)


def policy_sample(actor_params: ParamSet, feature: torch.Tensor, generator: torch.Generator | None = None,
                  noise: torch.Tensor | None = None, deterministic: bool = False,
                  log_std_bounds: tuple[float, float] = (-10.0, 2.0)) -> tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized squashed-Gaussian sample; deterministic mode returns tanh(mean)"""
    mean, log_std = policy_heads(actor_params, feature, log_std_bounds)
    if deterministic:
        pre_tanh = mean
    else:
        if noise is None:
            noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        pre_tanh = mean + torch.exp(log_std) * noise
    return torch.tanh(pre_tanh), squashed_log_prob(pre_tanh, mean, log_std)


# ---------------------------------------------------------------------------
# Critic side

def critic_values(critic_params: ParamSet, feature: torch.Tensor,
                  action: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.cat([feature, action], dim=-1)
    q1 = mlp_forward(critic_params, x, "critic.q1").squeeze(-1)
    q2 = mlp_forward(critic_params, x, "critic.q2").squeeze(-1)
    return q1, q2


def soft_target(min_q: torch.Tensor, log_prob: torch.Tensor, alpha) -> torch.Tensor:
    return min_q - alpha * log_prob


def target_value(nets: ActorCritic, policy_features: torch.Tensor, critic_features: torch.Tensor | None = None,
                 generator: torch.Generator | None = None, noise: torch.Tensor | None = None) -> torch.Tensor:
    """V(o') = min_i Q_target_i(o', a') - alpha * log pi(a'|o'), with a' freshly drawn; no gradients"""
    if critic_features is None:
        critic_features = policy_features
    with torch.no_grad():
        action, log_prob = policy_sample(
            nets.actor, policy_features, generator, noise, log_std_bounds=nets.log_std_bounds
        )
        q1, q2 = critic_values(nets.critic_target, critic_features, action)
        return soft_target(torch.min(q1, q2), log_prob, nets.alpha)


def bellman_target(rewards: torch.Tensor, dones: torch.Tensor, next_value: torch.Tensor,
                   gamma: float) -> torch.Tensor:
    return (rewards + gamma * (1.0 - dones) * next_value).detach()


def critic_loss(critic_params: ParamSet, features: torch.Tensor, actions: torch.Tensor, rewards: torch.Tensor,
                dones: torch.Tensor, next_value: torch.Tensor, gamma: float) -> torch.Tensor:
    """Mean over batch and both critics of the squared soft Bellman residual"""
    target = bellman_target(rewards, dones, next_value, gamma)
    q1, q2 = critic_values(critic_params, features, actions)
    return 0.5 * ((q1 - target).pow(2).mean() + (q2 - target).pow(2).mean())


def actor_loss(actor_params: ParamSet, features: torch.Tensor, critic_params: ParamSet, alpha,
               generator: torch.Generator | None = None, noise: torch.Tensor | None = None,
               log_std_bounds: tuple[float, float] = (-10.0, 2.0)) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns (mean(alpha * log pi - min_i Q_i), log pi); features are cut from the encoder"""
    features = stop_gradient(features)
    action, log_prob = policy_sample(actor_params, features, generator, noise, log_std_bounds=log_std_bounds)
    q1, q2 = critic_values(critic_params, features, action)
    return (alpha * log_prob - torch.min(q1, q2)).mean(), log_prob


def alpha_loss(log_alpha: torch.Tensor, log_probs: torch.Tensor, target_entropy: float) -> torch.Tensor:
    return -(log_alpha * (log_probs + target_entropy).detach()).mean()


def alpha_update(temperature: ParamSet, log_probs: torch.Tensor, target_entropy: float,
                 optim: OptimState) -> tuple[ParamSet, float]:
    log_probs = log_probs.detach()
    loss, grads = backward(lambda p: alpha_loss(p["log_alpha"], log_probs, target_entropy), temperature,
                           path="sac/alpha_loss")
    adam_step(temperature, grads, optim)
    return temperature, loss


def ema_update(online: ParamSet, target: ParamSet, tau: float) -> ParamSet:
    """target <- (1 - tau) * target + tau * online, in place"""
    if not 0.0 <= tau <= 1.0:
        raise ConfigurationError(f"EMA tau must lie in [0, 1], got {tau}")
    if set(online) != set(target):
        raise ConfigurationError(f"EMA keyspaces differ: {sorted(set(online) ^ set(target))[:5]}")
    with torch.no_grad():
        for key, value in online.items():
            target[key].lerp_(value.detach(), tau)
    return target


# ---------------------------------------------------------------------------
# Training step

@dataclass
class SacOptimizers:
    actor: OptimState
    critic: OptimState
    temperature: OptimState
    encoder: OptimState | None = None

    def groups(self) -> dict[str, OptimState]:
        groups = {"actor": self.actor, "critic": self.critic, "temperature": self.temperature}
        if self.encoder is not None:
            groups["encoder"] = self.encoder
        return groups


def build_optimizers(nets: ActorCritic, optim: OptimConfig) -> SacOptimizers:
    encoder = None
    if nets.encoder:
        encoder = OptimState(nets.encoder, optim.encoder_lr, optim.betas, optim.eps, name="encoder")
    return SacOptimizers(
        actor=OptimState(nets.actor, optim.actor_lr, optim.betas, optim.eps, name="actor"),
        critic=OptimState(nets.critic, optim.critic_lr, optim.betas, optim.eps, name="critic"),
        temperature=OptimState(nets.temperature, optim.alpha_lr, optim.alpha_betas, optim.eps, name="temperature"),
        encoder=encoder,
    )


def sac_train_step(nets: ActorCritic, optims: SacOptimizers, buffer: ReplayBuffer, hyper: SacHyper,
                   streams: LearnerStreams, step: int, augment: TranslateSpec | None = None,
                   target_entropy: float | None = None,
                   dtype: torch.dtype = torch.float32) -> tuple[ActorCritic, dict[str, float]]:
    """sample -> augment -> critic (+ encoder) -> actor -> temperature -> periodic EMA"""
    rep = nets.representation
    if target_entropy is None:
        target_entropy = -float(nets.action_dim)

    batch = buffer.sample(hyper.batch_size, rep.n_frames, streams.replay)
    batch.obs, batch.next_obs = translate_windows(batch.obs, batch.next_obs, augment, streams.augment)
    tensors = batch.to_tensors(dtype)

    with torch.no_grad():
        policy_next = rep(nets.encoder, tensors.next_obs)
        critic_next = rep(nets.encoder_target, tensors.next_obs)
    next_value = target_value(nets, policy_next, critic_next, streams.noise)

    def critic_objective(params):
        features = rep(params, tensors.obs)
        return critic_loss(params, features, tensors.actions, tensors.rewards, tensors.dones, next_value, hyper.gamma)

    q_loss, grads = backward(critic_objective, {**nets.encoder, **nets.critic}, path="sac/critic_loss")
    adam_step(nets.critic, {k: grads[k] for k in nets.critic if k in grads}, optims.critic)
    if optims.encoder is not None:
        adam_step(nets.encoder, {k: grads[k] for k in nets.encoder if k in grads}, optims.encoder)

    with torch.no_grad():
        features = rep(nets.encoder, tensors.obs)
    sampled: dict[str, torch.Tensor] = {}

    def actor_objective(params):
        loss, log_prob = actor_loss(params, features, nets.critic, nets.alpha, streams.noise,
                                    log_std_bounds=nets.log_std_bounds)
        sampled["log_prob"] = log_prob
        return loss

    pi_loss, grads = backward(actor_objective, nets.actor, path="sac/actor_loss")
    adam_step(nets.actor, grads, optims.actor)

    _, t_loss = alpha_update(nets.temperature, sampled["log_prob"], target_entropy, optims.temperature)

    if step % hyper.target_update_freq == 0:
        ema_update(nets.critic, nets.critic_target, hyper.critic_tau)
        ema_update(nets.encoder, nets.encoder_target, hyper.encoder_tau)

    metrics = {
        "step": step,
        "critic_loss": q_loss,
        "actor_loss": pi_loss,
        "alpha_loss": t_loss,
        "alpha": float(nets.alpha),
        "batch_reward_mean": float(tensors.rewards.mean()),
    }
    logger.debug(f"sac step {step}: critic {q_loss:.4f} actor {pi_loss:.4f} alpha {metrics['alpha']:.4f}")
    return nets, metrics


# ---------------------------------------------------------------------------
# Acting

class PolicySnapshot:
    """Frozen copy of encoder + actor for action selection; refresh swaps it atomically"""

    def __init__(self, representation: Representation, encoder: ParamSet, actor: ParamSet,
                 log_std_bounds: tuple[float, float] = (-10.0, 2.0)):
        self.representation = representation
        self.log_std_bounds = log_std_bounds
        self._lock = threading.Lock()
        self._params: ParamSet = {}
        self.version = 0
        self.refresh(encoder, actor)

    def refresh(self, encoder: ParamSet, actor: ParamSet) -> None:
        frozen = clone_params({**encoder, **actor}, requires_grad=False)
        with self._lock:
            self._params = frozen
            self.version += 1

    @property
    def params(self) -> ParamSet:
        with self._lock:
            return self._params

    def act(self, window: np.ndarray, deterministic: bool = True,
            generator: torch.Generator | None = None) -> np.ndarray:
        params = self.params
        dtype = next(iter(params.values())).dtype
        with torch.no_grad():
            obs = torch.as_tensor(np.asarray(window), dtype=dtype).unsqueeze(0)
            feature = self.representation(params, obs)
            action, _ = policy_sample(params, feature, generator, deterministic=deterministic,
                                      log_std_bounds=self.log_std_bounds)
        return action[0].numpy().astype(np.float32)


class SacAgent:
    kind = "sac"

    def __init__(self, representation: Representation, action_dim: int, hyper: SacHyper, optim: OptimConfig,
                 seed: int = 0, augment: TranslateSpec | None = None, dtype: torch.dtype = torch.float32):
        self.representation = representation
        self.hyper = hyper
        self.augment = augment
        self.dtype = dtype
        generator = torch.Generator().manual_seed(seed)
        self.nets = init_actor_critic(representation, action_dim, hyper, generator, dtype)
        self.optims = build_optimizers(self.nets, optim)
        self.target_entropy = hyper.target_entropy if hyper.target_entropy is not None else -float(action_dim)
        self.snapshot = PolicySnapshot(representation, self.nets.encoder, self.nets.actor, self.nets.log_std_bounds)
        self.updates = 0

    def prepare_window(self, window: np.ndarray) -> np.ndarray:
        """Acting-time placement: centered on the augmentation canvas"""
        if self.augment is None:
            return window
        placed, _ = center_translate(window, self.augment)
        return placed

    def act(self, window: np.ndarray, deterministic: bool = False,
            streams: LearnerStreams | None = None) -> np.ndarray:
        generator = streams.noise if streams is not None else None
        return self.snapshot.act(self.prepare_window(window), deterministic, generator)

    def update(self, buffer: ReplayBuffer, streams: LearnerStreams) -> dict[str, float]:
        self.updates += 1
        _, metrics = sac_train_step(
            self.nets, self.optims, buffer, self.hyper, streams, self.updates,
            self.augment, self.target_entropy, self.dtype,
        )
        self.snapshot.refresh(self.nets.encoder, self.nets.actor)
        return metrics

    def parameter_count(self) -> dict[str, int]:
        return {group: count_parameters(params) for group, params in self.nets.groups().items()}

    def save(self, path: str | Path, **metadata) -> Path:
        return save_checkpoint(path, self.nets.groups(), self.optims.groups(),
                               kind=self.kind, updates=self.updates, **metadata)

    def load(self, path: str | Path, with_optimizers: bool = True) -> dict:
        payload = load_checkpoint(path)
        if payload["metadata"].get("kind") != self.kind:
            raise CheckpointError(f"Checkpoint {path} holds a {payload['metadata'].get('kind')!r} agent, not sac")
        for group, params in self.nets.groups().items():
            restore_params_(params, payload["params"].get(group, {}))
        if with_optimizers:
            for group, optim in self.optims.groups().items():
                optim.load_state_dict(payload["optim"][group])
        self.updates = int(payload["metadata"].get("updates", 0))
        self.snapshot.refresh(self.nets.encoder, self.nets.actor)
        return payload["metadata"]
