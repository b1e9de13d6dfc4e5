"""
Bounded FIFO replay with on-demand temporal stacking.

Each pushed transition stores its observation once. The next observation is
read from the successor slot when the successor belongs to the same episode;
only the newest transition of each episode keeps a separate copy of it. Frame
windows are assembled at sample time, so k-frame stacks cost O(T) storage.

Layout:
  - obs:      o_0, o_1, ..., o_{T-1}
  - tail:     o_T for the last stored transition of each episode
  - step:     position inside the episode (0 at episode start)
"""

import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from flare.utils.errors import CheckpointError, ConfigurationError, InsufficientDataError

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


def to_byte_levels(frame: np.ndarray) -> np.ndarray:
    """uint8 storage code of a [0, 1] frame"""
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray | int
    reward: float
    next_obs: np.ndarray
    done: bool
    episode_id: int


@dataclass
class Batch:
    obs: np.ndarray        # (B, n, *obs_shape)
    actions: np.ndarray    # (B, action_dim) continuous, (B,) discrete
    rewards: np.ndarray    # (B,)
    next_obs: np.ndarray   # (B, n, *obs_shape)
    dones: np.ndarray      # (B,) float32
    indices: np.ndarray    # (B,) buffer slots

    def __len__(self):
        return len(self.rewards)

    def to_tensors(self, dtype: torch.dtype = torch.float32) -> "TensorBatch":
        actions = torch.as_tensor(self.actions)
        return TensorBatch(
            obs=torch.as_tensor(self.obs, dtype=dtype),
            actions=actions if actions.dtype == torch.int64 else actions.to(dtype),
            rewards=torch.as_tensor(self.rewards, dtype=dtype),
            next_obs=torch.as_tensor(self.next_obs, dtype=dtype),
            dones=torch.as_tensor(self.dones, dtype=dtype),
        )


@dataclass
class TensorBatch:
    obs: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    next_obs: torch.Tensor
    dones: torch.Tensor


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape: tuple[int, ...], action_shape: tuple[int, ...] = (1,),
                 discrete: bool = False, quantize: bool = False):
        """
        Args:
            capacity: maximum number of transitions kept (FIFO eviction)
            obs_shape: shape of one observation (a frame or a state vector)
            action_shape: shape of a continuous action (ignored when discrete)
            discrete: store integer action indices
            quantize: store [0, 1] frames as uint8 (returned as float32 on sample); pair with
                FrameHistory(quantize=True) so acting sees the same 1/255 levels
        """
        if capacity < 1:
            raise ConfigurationError(f"Replay capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.obs_shape = tuple(obs_shape)
        self.discrete = discrete
        self.quantize = quantize
        obs_dtype = np.uint8 if quantize else np.float32
        self._obs = np.zeros((self.capacity, *self.obs_shape), dtype=obs_dtype)
        if discrete:
            self._actions = np.zeros(self.capacity, dtype=np.int64)
        else:
            self._actions = np.zeros((self.capacity, *action_shape), dtype=np.float32)
        self._rewards = np.zeros(self.capacity, dtype=np.float32)
        self._dones = np.zeros(self.capacity, dtype=bool)
        self._episode = np.full(self.capacity, -1, dtype=np.int64)
        self._step = np.zeros(self.capacity, dtype=np.int64)
        self._serial = np.full(self.capacity, -1, dtype=np.int64)
        self._tail: dict[int, np.ndarray] = {}
        self._cursor = 0
        self._size = 0
        self._pushed = 0
        self._last_slot: int | None = None

    def __len__(self):
        return self._size

    # storage ----------------------------------------------------------------

    def _encode(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float32)
        if obs.shape != self.obs_shape:
            raise ConfigurationError(f"Observation shape {obs.shape} does not match buffer shape {self.obs_shape}")
        if self.quantize:
            return to_byte_levels(obs)
        return obs.copy()

    def _decode(self, stored: np.ndarray) -> np.ndarray:
        if self.quantize:
            return stored.astype(np.float32) / 255.0
        return stored.astype(np.float32, copy=False)

    def push(self, transition: Transition) -> None:
        slot = self._cursor
        self._tail.pop(slot, None)

        prev = self._last_slot
        continuing = (
            prev is not None
            and self._episode[prev] == transition.episode_id
            and not self._dones[prev]
        )
        step = int(self._step[prev]) + 1 if continuing else 0
        if continuing:
            # the successor's observation now stands in for prev's next observation
            self._tail.pop(prev, None)

        self._obs[slot] = self._encode(transition.obs)
        if self.discrete:
            self._actions[slot] = int(transition.action)
        else:
            self._actions[slot] = np.asarray(transition.action, dtype=np.float32).reshape(self._actions.shape[1:])
        self._rewards[slot] = float(transition.reward)
        self._dones[slot] = bool(transition.done)
        self._episode[slot] = int(transition.episode_id)
        self._step[slot] = step
        self._serial[slot] = self._pushed
        self._tail[slot] = self._encode(transition.next_obs)

        self._last_slot = slot
        self._pushed += 1
        self._cursor = (slot + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    # accounting -------------------------------------------------------------

    def frames_stored(self) -> int:
        """Observations held in memory: one per transition plus one tail per episode"""
        return self._size + len(self._tail)

    def nbytes(self) -> int:
        per_frame = self._obs.itemsize * int(np.prod(self.obs_shape))
        return self.frames_stored() * per_frame

    # sampling ---------------------------------------------------------------

    @property
    def _oldest_slot(self) -> int:
        return 0 if self._size < self.capacity else self._cursor

    @property
    def _oldest_serial(self) -> int:
        return self._pushed - self._size

    def _next_frame(self, slot: int) -> np.ndarray:
        successor = (slot + 1) % self.capacity
        if (
            slot != self._last_slot
            and self._serial[successor] == self._serial[slot] + 1
            and self._episode[successor] == self._episode[slot]
            and not self._dones[slot]
        ):
            return self._obs[successor]
        return self._tail[slot]

    def _windows(self, slots: np.ndarray, n_frames: int) -> tuple[np.ndarray, np.ndarray]:
        # frames older than the episode start (or already evicted) repeat the earliest one
        available = np.minimum(self._step[slots], self._serial[slots] - self._oldest_serial)
        lags = np.arange(n_frames - 1, -1, -1)
        clipped = np.minimum(lags[None, :], available[:, None])
        obs = self._obs[(slots[:, None] - clipped) % self.capacity]
        last = np.stack([self._next_frame(int(s)) for s in slots])
        next_obs = np.concatenate([obs[:, 1:], last[:, None]], axis=1)
        return self._decode(obs), self._decode(next_obs)

    def sample(self, batch_size: int, n_frames: int, rng: np.random.Generator) -> Batch:
        """Uniform with replacement; each item carries n-frame windows ending at o_t and o_{t+1}"""
        if n_frames < 1:
            raise ConfigurationError(f"n_frames must be >= 1, got {n_frames}")
        if self._size == 0 or self._size < batch_size:
            raise InsufficientDataError(self._size, batch_size)
        positions = rng.integers(0, self._size, size=batch_size)
        slots = (self._oldest_slot + positions) % self.capacity
        obs, next_obs = self._windows(slots, n_frames)
        return Batch(
            obs=obs,
            actions=self._actions[slots].copy(),
            rewards=self._rewards[slots].copy(),
            next_obs=next_obs,
            dones=self._dones[slots].astype(np.float32),
            indices=slots,
        )

    # snapshots --------------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tail_slots = np.array(sorted(self._tail), dtype=np.int64)
        tail_obs = (np.stack([self._tail[int(s)] for s in tail_slots]) if len(tail_slots)
                    else np.zeros((0, *self.obs_shape), dtype=self._obs.dtype))
        with path.open("wb") as f:
            np.savez_compressed(
                f,
                format_version=SNAPSHOT_VERSION,
                capacity=self.capacity, obs_shape=np.array(self.obs_shape), action_shape=np.array(self._actions.shape[1:]),
                discrete=self.discrete, quantize=self.quantize,
                obs=self._obs, actions=self._actions, rewards=self._rewards, dones=self._dones,
                episode=self._episode, step=self._step, serial=self._serial,
                tail_slots=tail_slots, tail_obs=tail_obs,
                counters=np.array([self._cursor, self._size, self._pushed,
                                   -1 if self._last_slot is None else self._last_slot]),
            )
        logger.info(f"Replay snapshot ({self._size} transitions) written to {path}")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ReplayBuffer":
        path = Path(path)
        try:
            archive = np.load(path)
        except Exception as e:
            raise CheckpointError(f"Cannot read replay snapshot {path}: {e}") from e
        with archive as data:
            if int(data["format_version"]) != SNAPSHOT_VERSION:
                raise CheckpointError(f"Unsupported replay snapshot version {int(data['format_version'])}")
            buffer = cls(
                int(data["capacity"]), tuple(int(v) for v in data["obs_shape"]),
                tuple(int(v) for v in data["action_shape"]), bool(data["discrete"]), bool(data["quantize"]),
            )
            buffer._obs[...] = data["obs"]
            buffer._actions[...] = data["actions"]
            buffer._rewards[...] = data["rewards"]
            buffer._dones[...] = data["dones"]
            buffer._episode[...] = data["episode"]
            buffer._step[...] = data["step"]
            buffer._serial[...] = data["serial"]
            buffer._tail = {int(s): o for s, o in zip(data["tail_slots"], data["tail_obs"])}
            cursor, size, pushed, last = (int(v) for v in data["counters"])
        buffer._cursor, buffer._size, buffer._pushed = cursor, size, pushed
        buffer._last_slot = None if last < 0 else last
        return buffer


class FrameHistory:
    """Acting-time window of the last n observations, padded like replay windows"""

    def __init__(self, n_frames: int, quantize: bool = False):
        if n_frames < 1:
            raise ConfigurationError(f"n_frames must be >= 1, got {n_frames}")
        self.n_frames = n_frames
        self.quantize = quantize
        self._frames: deque = deque(maxlen=n_frames)

    def _prepare(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float32)
        # same rounding the learner sees when replay stores uint8 frames
        return to_byte_levels(frame).astype(np.float32) / 255.0 if self.quantize else frame

    def reset(self, first: np.ndarray) -> np.ndarray:
        self._frames.clear()
        first = self._prepare(first)
        for _ in range(self.n_frames):
            self._frames.append(first)
        return self.window()

    def push(self, frame: np.ndarray) -> np.ndarray:
        self._frames.append(self._prepare(frame))
        return self.window()

    def window(self) -> np.ndarray:
        return np.stack(self._frames, axis=0)


@dataclass
class LearnerStreams:
    """Independent random streams used by one training run"""
    replay: np.random.Generator
    augment: np.random.Generator
    explore: np.random.Generator
    noise: torch.Generator
