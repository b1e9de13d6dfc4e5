"""
Input representations: frame-wise encoding, latent flow with a detached
subtrahend, late fusion through FC + layer norm, and the state-space and
pixel-space variants used by the ablations.

All representation parameters live under the "encoder." prefix (the fusion
head included) so they share one optimizer group and one EMA target.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import torch
import torch.nn.functional as F

from flare.services.envs import ObservationMode
from flare.services.nn import (
    EncoderSpec,
    ParamSet,
    RecurrentState,
    conv_encoder_forward,
    init_conv_encoder,
    init_linear,
    init_lstm,
    layer_norm,
    recurrent_step,
    stop_gradient,
)
from flare.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

ENCODER_PREFIX = "encoder"
HEAD_PREFIX = "encoder.head"
LSTM_PREFIX = "encoder.lstm"
STATE_HISTORY = 4


class RepresentationMode(str, Enum):
    FLARE_PIXEL = "FlarePixel"
    FRAME_STACK_PIXEL = "FrameStackPixel"
    LATENT_CONCAT_PIXEL = "LatentConcatPixel"
    PIXEL_FLOW = "PixelFlow"
    STATE_FULL = "StateFull"
    STATE_POSITION_ONLY = "StatePositionOnly"
    STATE_STACK = "StateStack"
    STATE_RECURRENT = "StateRecurrent"
    STATE_FLARE = "StateFlare"

    @property
    def is_pixel(self) -> bool:
        return self in PIXEL_MODES

    @property
    def uses_flow(self) -> bool:
        return self in (RepresentationMode.FLARE_PIXEL, RepresentationMode.PIXEL_FLOW)

    @property
    def needs_history(self) -> bool:
        return self in STATE_HISTORY_MODES

    @property
    def observation_mode(self) -> ObservationMode:
        if self.is_pixel:
            return ObservationMode.PIXELS
        if self is RepresentationMode.STATE_FULL:
            return ObservationMode.FULL
        return ObservationMode.POSITION_ONLY


PIXEL_MODES = frozenset({
    RepresentationMode.FLARE_PIXEL,
    RepresentationMode.FRAME_STACK_PIXEL,
    RepresentationMode.LATENT_CONCAT_PIXEL,
    RepresentationMode.PIXEL_FLOW,
})
STATE_HISTORY_MODES = frozenset({
    RepresentationMode.STATE_STACK,
    RepresentationMode.STATE_RECURRENT,
    RepresentationMode.STATE_FLARE,
})


# ---------------------------------------------------------------------------
# Building blocks

def encode_frames(encoder_params: ParamSet, frames: torch.Tensor, spec: EncoderSpec,
                  prefix: str = ENCODER_PREFIX) -> torch.Tensor:
    """(..., n, C, H, W) -> (..., n, latent_dim) with one shared encoder"""
    if frames.dim() < 4:
        raise ConfigurationError(f"encode_frames expects (..., n, C, H, W), got {tuple(frames.shape)}")
    return conv_encoder_forward(encoder_params, frames, spec, prefix)


def latent_flow(latents: torch.Tensor, detach: bool = True) -> torch.Tensor:
    """delta_j = z_j - stop_gradient(z_{j-1}) over the frame axis (-2)"""
    if latents.dim() < 2 or latents.shape[-2] < 2:
        raise ConfigurationError(f"latent_flow needs at least 2 latents, got shape {tuple(latents.shape)}")
    previous = latents[..., :-1, :]
    if detach:
        previous = stop_gradient(previous)
    return latents[..., 1:, :] - previous


def init_head(in_dim: int, width: int, generator: torch.Generator, dtype: torch.dtype = torch.float32,
              prefix: str = HEAD_PREFIX) -> ParamSet:
    params = init_linear(f"{prefix}.fc", in_dim, width, generator, dtype)
    params[f"{prefix}.ln.gain"] = torch.ones(width, dtype=dtype, requires_grad=True)
    params[f"{prefix}.ln.bias"] = torch.zeros(width, dtype=dtype, requires_grad=True)
    return params


def apply_head(head_params: ParamSet, x: torch.Tensor, prefix: str = HEAD_PREFIX, eps: float = 1e-5) -> torch.Tensor:
    """FC then layer norm; no rectification in front of the head"""
    weight = head_params[f"{prefix}.fc.weight"]
    if x.shape[-1] != weight.shape[1]:
        raise ConfigurationError(f"Fusion head expects {weight.shape[1]} inputs, got {x.shape[-1]}")
    h = F.linear(x, weight, head_params[f"{prefix}.fc.bias"])
    return layer_norm(h, head_params[f"{prefix}.ln.gain"], head_params[f"{prefix}.ln.bias"], eps)


def fuse(latents: torch.Tensor, flows: torch.Tensor | None, head_params: ParamSet,
         prefix: str = HEAD_PREFIX, eps: float = 1e-5) -> torch.Tensor:
    """
    Concatenate (latents oldest->newest, flows oldest->newest) and apply the head.

    With n latents and n-1 flows the oldest latent only enters through the
    first flow. With flows=None every latent is concatenated.
    """
    if flows is None:
        parts = [latents.flatten(start_dim=-2)]
    else:
        if flows.shape[-2] != latents.shape[-2] - 1:
            raise ConfigurationError(
                f"fuse: {latents.shape[-2]} latents need {latents.shape[-2] - 1} flows, got {flows.shape[-2]}"
            )
        parts = [latents[..., 1:, :].flatten(start_dim=-2), flows.flatten(start_dim=-2)]
    return apply_head(head_params, torch.cat(parts, dim=-1), prefix, eps)


def state_flare_features(positions: torch.Tensor) -> torch.Tensor:
    """
    (..., 4, d) positions oldest->newest -> (s_t, s_t - s_{t-1}, s_{t-1} - s_{t-2}, s_{t-2} - s_{t-3}).
    A 1-D input of length 4 is treated as scalar positions.
    """
    if positions.dim() == 1:
        positions = positions.unsqueeze(-1)
    if positions.dim() < 2 or positions.shape[-2] != STATE_HISTORY:
        raise ConfigurationError(f"state_flare_features needs {STATE_HISTORY} positions, got {tuple(positions.shape)}")
    offsets = (positions[..., 1:, :] - positions[..., :-1, :]).flip(-2)
    return torch.cat([positions[..., -1, :], offsets.flatten(start_dim=-2)], dim=-1)


def pixel_flow_preprocess(frames: torch.Tensor) -> torch.Tensor:
    """(..., n, C, H, W) -> (..., (2n-1)C, H, W): frames then consecutive pixel differences"""
    if frames.dim() < 4 or frames.shape[-4] < 2:
        raise ConfigurationError(f"pixel_flow_preprocess needs at least 2 frames, got {tuple(frames.shape)}")
    differences = frames[..., 1:, :, :, :] - frames[..., :-1, :, :, :]
    return torch.cat([frames.flatten(-4, -3), differences.flatten(-4, -3)], dim=-3)


# ---------------------------------------------------------------------------
# Representation dispatch

@dataclass
class Representation:
    mode: RepresentationMode
    n_frames: int
    obs_shape: tuple[int, ...]
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    head_width: int = 1024
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.mode = RepresentationMode(self.mode)
        self.obs_shape = tuple(self.obs_shape)
        n = self.n_frames
        if n < 1:
            raise ConfigurationError(f"frame count must be >= 1, got {n}")
        if self.mode.uses_flow and n < 2:
            raise ConfigurationError(f"{self.mode.value} needs at least 2 frames, got {n}")
        if self.mode.needs_history and n != STATE_HISTORY:
            raise ConfigurationError(f"{self.mode.value} uses {STATE_HISTORY} positions, got frame count {n}")
        if self.mode in (RepresentationMode.STATE_FULL, RepresentationMode.STATE_POSITION_ONLY) and n != 1:
            raise ConfigurationError(f"{self.mode.value} takes a single observation, got frame count {n}")
        if self.mode.is_pixel:
            if len(self.obs_shape) != 3:
                raise ConfigurationError(f"{self.mode.value} needs (C, H, W) observations, got {self.obs_shape}")
            channels, height, width = self.obs_shape
            if height != width or height != self.encoder.frame_size:
                raise ConfigurationError(
                    f"Encoder frame size {self.encoder.frame_size} does not match observations {self.obs_shape}"
                )
        elif len(self.obs_shape) != 1:
            raise ConfigurationError(f"{self.mode.value} needs vector observations, got {self.obs_shape}")

    @property
    def frame_encoder_spec(self) -> EncoderSpec:
        """Encoder geometry with the channel count this mode feeds it"""
        base = self.obs_shape[0]
        if self.mode is RepresentationMode.FRAME_STACK_PIXEL:
            channels = self.n_frames * base
        elif self.mode is RepresentationMode.PIXEL_FLOW:
            channels = (2 * self.n_frames - 1) * base
        else:
            channels = base
        return replace(self.encoder, in_channels=channels)

    @property
    def pre_head_dim(self) -> int:
        latent = self.encoder.latent_dim
        if self.mode is RepresentationMode.FLARE_PIXEL:
            return 2 * (self.n_frames - 1) * latent
        if self.mode is RepresentationMode.LATENT_CONCAT_PIXEL:
            return self.n_frames * latent
        if self.mode.is_pixel:
            return latent
        raise ConfigurationError(f"{self.mode.value} has no fusion head")

    @property
    def feature_dim(self) -> int:
        if self.mode.is_pixel:
            return self.head_width
        d = self.obs_shape[0]
        if self.mode is RepresentationMode.STATE_STACK:
            return STATE_HISTORY * d
        if self.mode is RepresentationMode.STATE_FLARE:
            return STATE_HISTORY * d
        if self.mode is RepresentationMode.STATE_RECURRENT:
            return self.recurrent_hidden
        return d

    @property
    def recurrent_hidden(self) -> int:
        # sized like the positional-offset vector it stands in for
        return (STATE_HISTORY - 1) * self.obs_shape[0]

    def init_params(self, generator: torch.Generator, dtype: torch.dtype = torch.float32) -> ParamSet:
        if self.mode.is_pixel:
            params = init_conv_encoder(self.frame_encoder_spec, generator, ENCODER_PREFIX, dtype)
            params.update(init_head(self.pre_head_dim, self.head_width, generator, dtype))
            return params
        if self.mode is RepresentationMode.STATE_RECURRENT:
            return init_lstm(LSTM_PREFIX, self.obs_shape[0], self.recurrent_hidden, generator, dtype)
        return {}

    def __call__(self, params: ParamSet, window: torch.Tensor) -> torch.Tensor:
        return build_representation(self.mode, window, params, self)


def representation_parameter_count(rep: Representation) -> int:
    """Parameter count of rep.init_params() without allocating it"""
    if rep.mode.is_pixel:
        spec = rep.frame_encoder_spec
        channels, conv = spec.in_channels, 0
        for _ in range(spec.num_layers):
            conv += spec.filters * channels * spec.kernel_size ** 2 + spec.filters
            channels = spec.filters
        latent = (spec.flat_dim + 1) * spec.latent_dim
        head = (rep.pre_head_dim + 1) * rep.head_width + 2 * rep.head_width
        return conv + latent + head
    if rep.mode is RepresentationMode.STATE_RECURRENT:
        h, d = rep.recurrent_hidden, rep.obs_shape[0]
        return 4 * h * (d + h) + 8 * h
    return 0


def build_representation(mode: RepresentationMode, inputs: torch.Tensor, params: ParamSet,
                         representation: Representation) -> torch.Tensor:
    """inputs: observation window (..., n, *obs_shape) -> feature (..., feature_dim)"""
    mode = RepresentationMode(mode)
    rep = representation
    if mode is not rep.mode:
        raise ConfigurationError(f"Representation built for {rep.mode.value}, asked for {mode.value}")
    expected = (rep.n_frames, *rep.obs_shape)
    if inputs.dim() < len(expected) or tuple(inputs.shape[-len(expected):]) != expected:
        raise ConfigurationError(f"{mode.value} expects windows ending in {expected}, got {tuple(inputs.shape)}")

    if mode in (RepresentationMode.STATE_FULL, RepresentationMode.STATE_POSITION_ONLY):
        return inputs[..., -1, :]
    if mode is RepresentationMode.STATE_STACK:
        return inputs.flatten(start_dim=-2)
    if mode is RepresentationMode.STATE_FLARE:
        return state_flare_features(inputs)
    if mode is RepresentationMode.STATE_RECURRENT:
        state = RecurrentState.zeros(rep.recurrent_hidden, inputs.shape[:-2], inputs.dtype)
        for j in range(rep.n_frames):
            state = recurrent_step(params, inputs[..., j, :], state, LSTM_PREFIX)
        return state.hidden

    spec = rep.frame_encoder_spec
    if mode is RepresentationMode.FRAME_STACK_PIXEL:
        latent = conv_encoder_forward(params, inputs.flatten(-4, -3), spec, ENCODER_PREFIX)
        return apply_head(params, latent, eps=rep.ln_eps)
    if mode is RepresentationMode.PIXEL_FLOW:
        latent = conv_encoder_forward(params, pixel_flow_preprocess(inputs), spec, ENCODER_PREFIX)
        return apply_head(params, latent, eps=rep.ln_eps)
    latents = encode_frames(params, inputs, spec)
    if mode is RepresentationMode.LATENT_CONCAT_PIXEL:
        return fuse(latents, None, params, eps=rep.ln_eps)
    return fuse(latents, latent_flow(latents), params, eps=rep.ln_eps)


# ---------------------------------------------------------------------------
# Diagnostics

@dataclass
class LinearizationReport:
    finite_difference: torch.Tensor
    jvp: torch.Tensor
    relative_error: float
    delta_norm: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.relative_error <= self.tolerance


def linearization_check(encoder_params: ParamSet, frame: torch.Tensor, perturbation: torch.Tensor,
                        spec: EncoderSpec, tolerance: float = 1e-2,
                        prefix: str = ENCODER_PREFIX) -> LinearizationReport:
    """Compare z(o + delta) - z(o) with the encoder Jacobian-vector product J(o) delta"""
    frozen = {k: v.detach() for k, v in encoder_params.items()}

    def encode(o):
        return conv_encoder_forward(frozen, o, spec, prefix)

    frame = frame.detach()
    perturbation = perturbation.detach().to(frame.dtype)
    with torch.no_grad():
        difference = encode(frame + perturbation) - encode(frame)
    _, directional = torch.func.jvp(encode, (frame,), (perturbation,))
    scale = max(float(directional.norm()), float(difference.norm()))
    error = float((difference - directional).norm())
    relative = 0.0 if scale == 0.0 else error / scale
    report = LinearizationReport(difference, directional, relative, float(perturbation.norm()), tolerance)
    if not report.passed:
        logger.warning(f"Linearization check above tolerance: {relative:.3e} > {tolerance:.1e}")
    return report
