"""Random-translate augmentation for frame stacks."""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from flare.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TranslateSpec:
    input_size: int
    output_size: int
    pad_value: float = 0.0

    def __post_init__(self):
        if self.input_size < 1:
            raise ConfigurationError(f"Translate input size must be positive, got {self.input_size}")
        if self.output_size < self.input_size:
            raise ConfigurationError(
                f"Translate output size {self.output_size} is smaller than input size {self.input_size}"
            )

    @property
    def max_offset(self) -> int:
        return self.output_size - self.input_size


def _as_stack(frames: np.ndarray | Sequence[np.ndarray], spec: TranslateSpec) -> np.ndarray:
    if not isinstance(frames, np.ndarray):
        shapes = {np.shape(f) for f in frames}
        if len(shapes) != 1:
            raise ConfigurationError(f"Frames in one stack must share a shape, got {sorted(shapes)}")
        frames = np.stack(frames)
    if frames.shape[-2:] != (spec.input_size, spec.input_size):
        raise ConfigurationError(
            f"Frames are {frames.shape[-2:]}, translate spec expects {(spec.input_size, spec.input_size)}"
        )
    return frames


def place(frames: np.ndarray, spec: TranslateSpec, dy: int, dx: int) -> np.ndarray:
    """Put frames (..., H, W) into a pad-value canvas at (dy, dx)"""
    size = spec.input_size
    canvas = np.full((*frames.shape[:-2], spec.output_size, spec.output_size), spec.pad_value, dtype=frames.dtype)
    canvas[..., dy:dy + size, dx:dx + size] = frames
    return canvas


def random_translate(frames, spec: TranslateSpec, rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int]]:
    """One uniform offset in {0..max_offset}^2 shared by every frame of the stack"""
    stack = _as_stack(frames, spec)
    dy, dx = (int(v) for v in rng.integers(0, spec.max_offset + 1, size=2))
    return place(stack, spec, dy, dx), (dy, dx)


def random_translate_batch(batch: np.ndarray, spec: TranslateSpec,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """batch (B, ...): independent offset per item, shared inside each item"""
    batch = _as_stack(batch, spec)
    offsets = rng.integers(0, spec.max_offset + 1, size=(batch.shape[0], 2))
    out = np.empty((*batch.shape[:-2], spec.output_size, spec.output_size), dtype=batch.dtype)
    for i, (dy, dx) in enumerate(offsets):
        out[i] = place(batch[i], spec, int(dy), int(dx))
    return out, offsets


def center_translate(frames, spec: TranslateSpec) -> tuple[np.ndarray, tuple[int, int]]:
    """Deterministic placement used for acting and evaluation"""
    stack = _as_stack(frames, spec)
    offset = spec.max_offset // 2
    return place(stack, spec, offset, offset), (offset, offset)


def translate_windows(obs: np.ndarray, next_obs: np.ndarray, spec: TranslateSpec | None,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent random placement of a batch's observation and next-observation windows"""
    if spec is None:
        return obs, next_obs
    obs, _ = random_translate_batch(obs, spec, rng)
    next_obs, _ = random_translate_batch(next_obs, spec, rng)
    return obs, next_obs
