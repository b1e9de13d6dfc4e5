"""
Desk-scale control environments with full-state, position-only and pixel
observations.

PendulumEnv is a sparse-reward torque-limited swing-up (angle measured from
upright). DotCatchEnv is a discrete catch game whose falling dot drifts
sideways, so a single frame never reveals where it will land. Both are
gymnasium environments: reset(seed=...) gives (observation, info) and step
gives (observation, reward, terminated, truncated, info).
"""

import logging
import math
from dataclasses import dataclass, fields
from enum import Enum
from typing import Any, NamedTuple, Union

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from flare.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

MIN_FRAME_SIZE = 16


class ObservationMode(str, Enum):
    FULL = "full"
    POSITION_ONLY = "position_only"
    PIXELS = "pixels"


@dataclass(frozen=True)
class Observation:
    mode: ObservationMode
    data: np.ndarray


class StepResult(NamedTuple):
    """gymnasium step tuple; unpacks as (obs, reward, terminated, truncated, info)"""
    observation: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict[str, Any]

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]"""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    return math.pi if wrapped <= -math.pi else wrapped


def _check_frame_size(size: int) -> None:
    if size < MIN_FRAME_SIZE:
        raise ConfigurationError(f"Frame size must be >= {MIN_FRAME_SIZE}, got {size}")


def _box(low, high) -> spaces.Box:
    return spaces.Box(np.asarray(low, dtype=np.float32), np.asarray(high, dtype=np.float32), dtype=np.float32)


def _frame_space(size: int) -> spaces.Box:
    return spaces.Box(0.0, 1.0, shape=(1, size, size), dtype=np.float32)


class DeskEnv(gym.Env):
    """Shared plumbing: per-mode observation spaces and the reset/step tuple shapes"""

    metadata = {"render_modes": []}
    observation_spaces: dict[ObservationMode, spaces.Box]

    def __init__(self, mode: ObservationMode):
        self.mode = ObservationMode(mode)
        self.observation_space = self.observation_spaces[self.mode]
        self.t = 0

    @property
    def discrete(self) -> bool:
        return isinstance(self.action_space, spaces.Discrete)

    @property
    def action_dim(self) -> int:
        return 1 if self.discrete else int(np.prod(self.action_space.shape))

    @property
    def num_actions(self) -> int | None:
        return int(self.action_space.n) if self.discrete else None

    def observation_shape(self, mode: ObservationMode | None = None) -> tuple[int, ...]:
        return self.observation_spaces[ObservationMode(mode or self.mode)].shape

    def reset(self, *, seed: int | None = None, options: dict | None = None) -> tuple[np.ndarray, dict]:
        """Deterministic per seed; seed=None continues the current generator"""
        super().reset(seed=seed)
        self.t = 0
        self.set_state(self.initial_state(self.np_random))
        return self.observe().data, {"t": self.t}

    def initial_state(self, rng: np.random.Generator):
        raise NotImplementedError

    def set_state(self, state) -> None:
        raise NotImplementedError

    def observe(self, mode: ObservationMode | None = None) -> Observation:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Pendulum

@dataclass(frozen=True)
class PendulumParams:
    gravity: float = 9.81
    length: float = 1.0
    mass: float = 1.0
    max_torque: float = 5.0
    dt: float = 0.02
    horizon: int = 200
    max_speed: float = 8.0
    init_angle_noise: float = 0.1
    init_velocity_noise: float = 0.0
    reward_threshold: float = 0.95
    frame_size: int = 64


@dataclass
class PendulumState:
    theta: float
    theta_dot: float


def mechanical_energy(state: PendulumState, params: PendulumParams) -> float:
    """Kinetic + potential energy, potential zero at the pivot height"""
    inertia = params.mass * params.length ** 2
    return 0.5 * inertia * state.theta_dot ** 2 + params.mass * params.gravity * params.length * math.cos(state.theta)


def render_pendulum(state: PendulumState, size: int, rod_fraction: float = 0.4) -> np.ndarray:
    """Anti-aliased rod from the image center; returns a (1, size, size) frame in [0, 1]"""
    _check_frame_size(size)
    coords = np.arange(size, dtype=np.float64) + 0.5
    xs, ys = np.meshgrid(coords, coords)
    center = size / 2.0
    length = rod_fraction * size
    # image y grows downwards, theta = 0 points up
    dx = length * math.sin(state.theta)
    dy = -length * math.cos(state.theta)
    t = np.clip(((xs - center) * dx + (ys - center) * dy) / (length ** 2), 0.0, 1.0)
    dist = np.hypot(xs - (center + t * dx), ys - (center + t * dy))
    half_width = max(1.0, size / 64.0)
    frame = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
    return frame[None].astype(np.float32)


class PendulumEnv(DeskEnv):
    def __init__(self, params: PendulumParams | None = None, mode: ObservationMode = ObservationMode.FULL):
        self.params = params or PendulumParams()
        _check_frame_size(self.params.frame_size)
        speed = self.params.max_speed
        self.observation_spaces = {
            ObservationMode.FULL: _box([-1.0, -1.0, -speed], [1.0, 1.0, speed]),
            ObservationMode.POSITION_ONLY: _box([-1.0, -1.0], [1.0, 1.0]),
            ObservationMode.PIXELS: _frame_space(self.params.frame_size),
        }
        self.action_space = spaces.Box(-1.0, 1.0, shape=(1,), dtype=np.float32)
        super().__init__(mode)
        self.state = PendulumState(math.pi, 0.0)

    def initial_state(self, rng: np.random.Generator) -> PendulumState:
        """Hanging down (theta = pi) plus uniform noise"""
        noise = rng.uniform(-self.params.init_angle_noise, self.params.init_angle_noise)
        velocity = rng.uniform(-self.params.init_velocity_noise, self.params.init_velocity_noise)
        return PendulumState(math.pi + noise, float(velocity))

    def set_state(self, state: PendulumState) -> None:
        self.state = PendulumState(wrap_angle(state.theta), float(state.theta_dot))

    def step(self, action) -> StepResult:
        p = self.params
        raw = float(np.asarray(action, dtype=np.float64).reshape(-1)[0])
        u = min(1.0, max(-1.0, raw))
        # semi-implicit Euler: velocity first, then angle with the new velocity
        accel = (p.gravity / p.length) * math.sin(self.state.theta) + u * p.max_torque / (p.mass * p.length ** 2)
        theta_dot = min(p.max_speed, max(-p.max_speed, self.state.theta_dot + p.dt * accel))
        theta = wrap_angle(self.state.theta + p.dt * theta_dot)
        self.state = PendulumState(theta, theta_dot)
        self.t += 1

        reward = 1.0 if math.cos(theta) > p.reward_threshold else 0.0
        info = {"clamped": u != raw, "t": self.t}
        return StepResult(self.observe().data, reward, False, self.t >= p.horizon, info)

    def render(self, state: PendulumState | None = None, size: int | None = None) -> np.ndarray:
        return render_pendulum(state or self.state, size or self.params.frame_size)

    def observe(self, mode: ObservationMode | None = None) -> Observation:
        mode = ObservationMode(mode or self.mode)
        theta, theta_dot = self.state.theta, self.state.theta_dot
        if mode is ObservationMode.FULL:
            data = np.array([math.cos(theta), math.sin(theta), theta_dot], dtype=np.float32)
        elif mode is ObservationMode.POSITION_ONLY:
            data = np.array([math.cos(theta), math.sin(theta)], dtype=np.float32)
        else:
            data = self.render()
        return Observation(mode, data)


# ---------------------------------------------------------------------------
# Dot catch

@dataclass(frozen=True)
class DotCatchParams:
    grid_width: int = 10
    grid_height: int = 10
    frame_size: int = 20


@dataclass
class DotCatchState:
    dot_x: int
    dot_y: int
    dot_vx: int
    paddle_x: int


def render_dot_catch(state: DotCatchState, params: DotCatchParams, size: int | None = None) -> np.ndarray:
    """Dot and paddle as filled squares; returns a (1, size, size) frame"""
    size = size or params.frame_size
    _check_frame_size(size)
    cell = size // max(params.grid_width, params.grid_height)
    if cell < 1:
        raise ConfigurationError(f"Frame size {size} cannot hold a {params.grid_width}x{params.grid_height} grid")
    frame = np.zeros((size, size), dtype=np.float32)
    frame[state.dot_y * cell:(state.dot_y + 1) * cell, state.dot_x * cell:(state.dot_x + 1) * cell] = 1.0
    floor = params.grid_height - 1
    frame[floor * cell:(floor + 1) * cell, state.paddle_x * cell:(state.paddle_x + 1) * cell] = 1.0
    return frame[None]


class DotCatchEnv(DeskEnv):
    """Actions: 0 left, 1 stay, 2 right"""

    def __init__(self, params: DotCatchParams | None = None, mode: ObservationMode = ObservationMode.PIXELS):
        self.params = params or DotCatchParams()
        _check_frame_size(self.params.frame_size)
        self.observation_spaces = {
            ObservationMode.FULL: _box([0.0, 0.0, -1.0, 0.0], [1.0, 1.0, 1.0, 1.0]),
            ObservationMode.POSITION_ONLY: _box([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]),
            ObservationMode.PIXELS: _frame_space(self.params.frame_size),
        }
        self.action_space = spaces.Discrete(3)
        super().__init__(mode)
        self.state = DotCatchState(0, 0, 1, self.params.grid_width // 2)

    def initial_state(self, rng: np.random.Generator) -> DotCatchState:
        return DotCatchState(
            dot_x=int(rng.integers(0, self.params.grid_width)),
            dot_y=0,
            dot_vx=int(rng.choice([-1, 1])),
            paddle_x=self.params.grid_width // 2,
        )

    def set_state(self, state: DotCatchState) -> None:
        self.state = DotCatchState(state.dot_x, state.dot_y, state.dot_vx, state.paddle_x)

    def step(self, action) -> StepResult:
        p = self.params
        raw = int(np.asarray(action).reshape(-1)[0])
        index = min(self.num_actions - 1, max(0, raw))
        s = self.state
        paddle_x = min(p.grid_width - 1, max(0, s.paddle_x + index - 1))
        vx = s.dot_vx
        next_x = s.dot_x + vx
        if next_x < 0 or next_x >= p.grid_width:
            vx = -vx
            next_x = s.dot_x + vx
        self.state = DotCatchState(next_x, s.dot_y + 1, vx, paddle_x)
        self.t += 1

        landed = self.state.dot_y >= p.grid_height - 1
        reward = 1.0 if landed and self.state.paddle_x == self.state.dot_x else 0.0
        info = {"clamped": index != raw, "t": self.t}
        return StepResult(self.observe().data, reward, landed, False, info)

    def render(self, state: DotCatchState | None = None, size: int | None = None) -> np.ndarray:
        return render_dot_catch(state or self.state, self.params, size)

    def observe(self, mode: ObservationMode | None = None) -> Observation:
        mode = ObservationMode(mode or self.mode)
        s, p = self.state, self.params
        x = s.dot_x / (p.grid_width - 1)
        y = s.dot_y / (p.grid_height - 1)
        paddle = s.paddle_x / (p.grid_width - 1)
        if mode is ObservationMode.FULL:
            data = np.array([x, y, float(s.dot_vx), paddle], dtype=np.float32)
        elif mode is ObservationMode.POSITION_ONLY:
            data = np.array([x, y, paddle], dtype=np.float32)
        else:
            data = self.render()
        return Observation(mode, data)


Env = Union[PendulumEnv, DotCatchEnv]
EnvState = Union[PendulumState, DotCatchState]
ENV_IDS = ("pendulum", "dot_catch")


def _params_from(cls, source) -> Any:
    values = {f.name: getattr(source, f.name, None) for f in fields(cls)}
    return cls(**{k: v for k, v in values.items() if v is not None})


def make_env(env_config, mode: ObservationMode | str) -> Env:
    """Build an environment from an EnvConfig section"""
    if env_config.id == "pendulum":
        return PendulumEnv(_params_from(PendulumParams, env_config), mode)
    if env_config.id == "dot_catch":
        return DotCatchEnv(_params_from(DotCatchParams, env_config), mode)
    raise ConfigurationError(f"Unknown environment id {env_config.id!r}; expected one of {ENV_IDS}")
