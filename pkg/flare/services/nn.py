"""
Functional network primitives over named parameter sets.

A ParamSet is a flat dict from parameter path ("critic.q1.0.weight") to a
torch tensor. Forward functions take the ParamSet explicitly so the same
code serves online networks, EMA targets and frozen acting snapshots.
"""

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F

from flare.utils.errors import CheckpointError, ConfigurationError, NonFiniteLossError

logger = logging.getLogger(__name__)

ParamSet = dict[str, torch.Tensor]
GradSet = dict[str, torch.Tensor]

CHECKPOINT_VERSION = 1
_LAYER_KEY = re.compile(r"^(\d+)\.weight$")


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Same value, no upstream derivative"""
    return x.detach()


def count_parameters(params: Mapping[str, torch.Tensor]) -> int:
    return sum(t.numel() for t in params.values())


def clone_params(params: Mapping[str, torch.Tensor], requires_grad: bool | None = None) -> ParamSet:
    """Deep copy; requires_grad=None keeps each tensor's flag"""
    out = {}
    for key, value in params.items():
        flag = value.requires_grad if requires_grad is None else requires_grad
        out[key] = value.detach().clone().requires_grad_(flag)
    return out


def cast_params(params: Mapping[str, torch.Tensor], dtype: torch.dtype) -> ParamSet:
    return {k: v.detach().to(dtype).requires_grad_(v.requires_grad) for k, v in params.items()}


def copy_params_(target: ParamSet, source: Mapping[str, torch.Tensor]) -> None:
    """In-place hard copy source -> target (identical keyspaces required)"""
    _check_keyspace(target, source, "copy_params_")
    with torch.no_grad():
        for key, value in source.items():
            target[key].copy_(value)


def dense_grads(grads: GradSet, params: Mapping[str, torch.Tensor]) -> GradSet:
    """Fill keys missing from a GradSet with exact zeros"""
    return {k: grads[k] if k in grads else torch.zeros_like(v) for k, v in params.items()}


def all_finite(params: Mapping[str, torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(v).all()) for v in params.values())


def _check_keyspace(a: Mapping, b: Mapping, where: str) -> None:
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))[:5]
        raise ConfigurationError(f"{where}: keyspaces differ (e.g. {missing})")


# ---------------------------------------------------------------------------
# Initialization

def _orthogonal(shape: Sequence[int], generator: torch.Generator, dtype: torch.dtype, gain: float = 1.0):
    weight = torch.empty(*shape, dtype=dtype)
    torch.nn.init.orthogonal_(weight, gain=gain, generator=generator)
    return weight


def init_linear(prefix: str, in_dim: int, out_dim: int, generator: torch.Generator,
                dtype: torch.dtype = torch.float32) -> ParamSet:
    return {
        f"{prefix}.weight": _orthogonal((out_dim, in_dim), generator, dtype).requires_grad_(True),
        f"{prefix}.bias": torch.zeros(out_dim, dtype=dtype, requires_grad=True),
    }


def init_mlp(prefix: str, sizes: Sequence[int], generator: torch.Generator,
             dtype: torch.dtype = torch.float32) -> ParamSet:
    """sizes = [in, hidden..., out]; layers are named prefix.0, prefix.1, ..."""
    if len(sizes) < 2:
        raise ConfigurationError(f"MLP {prefix!r} needs at least input and output sizes")
    params: ParamSet = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        params.update(init_linear(f"{prefix}.{i}", n_in, n_out, generator, dtype))
    return params


def _layer_indices(params: Mapping[str, torch.Tensor], prefix: str) -> list[int]:
    head = prefix + "."
    indices = []
    for key in params:
        if key.startswith(head):
            match = _LAYER_KEY.match(key[len(head):])
            if match:
                indices.append(int(match.group(1)))
    return sorted(indices)


def mlp_forward(params: Mapping[str, torch.Tensor], x: torch.Tensor, prefix: str = "mlp",
                final_activation: str | None = None) -> torch.Tensor:
    """ReLU between layers; the last layer is linear unless final_activation='relu'"""
    layers = _layer_indices(params, prefix)
    if not layers:
        raise ConfigurationError(f"No layers found under {prefix!r}")
    h = x
    for position, index in enumerate(layers):
        name = f"{prefix}.{index}"
        weight = params[f"{name}.weight"]
        if h.shape[-1] != weight.shape[1]:
            raise ConfigurationError(
                f"Layer {name} expects input dimension {weight.shape[1]}, got {h.shape[-1]}"
            )
        h = F.linear(h, weight, params.get(f"{name}.bias"))
        if position < len(layers) - 1 or final_activation == "relu":
            h = F.relu(h)
    return h


# ---------------------------------------------------------------------------
# Convolutional encoder

@dataclass(frozen=True)
class EncoderSpec:
    """Geometry of the per-frame convolutional encoder"""
    in_channels: int = 1
    frame_size: int = 64
    num_layers: int = 4
    filters: int = 32
    kernel_size: int = 3
    first_stride: int = 2
    latent_dim: int = 64
    nonlinearity: str = "relu"

    def stride(self, layer: int) -> int:
        return self.first_stride if layer == 0 else 1

    def conv_output_size(self) -> int:
        size = self.frame_size
        for layer in range(self.num_layers):
            size = (size - self.kernel_size) // self.stride(layer) + 1
            if size < 1:
                raise ConfigurationError(
                    f"Frame size {self.frame_size} too small for {self.num_layers} conv layers "
                    f"(collapses at layer {layer})"
                )
        return size

    @property
    def flat_dim(self) -> int:
        return self.filters * self.conv_output_size() ** 2


def init_conv_encoder(spec: EncoderSpec, generator: torch.Generator, prefix: str = "encoder",
                      dtype: torch.dtype = torch.float32) -> ParamSet:
    params: ParamSet = {}
    channels = spec.in_channels
    for layer in range(spec.num_layers):
        shape = (spec.filters, channels, spec.kernel_size, spec.kernel_size)
        params[f"{prefix}.conv.{layer}.weight"] = _orthogonal(shape, generator, dtype).requires_grad_(True)
        params[f"{prefix}.conv.{layer}.bias"] = torch.zeros(spec.filters, dtype=dtype, requires_grad=True)
        channels = spec.filters
    params.update(init_linear(f"{prefix}.fc", spec.flat_dim, spec.latent_dim, generator, dtype))
    return params


def _activate(x: torch.Tensor, nonlinearity: str) -> torch.Tensor:
    if nonlinearity == "relu":
        return F.relu(x)
    if nonlinearity == "identity":
        return x
    raise ConfigurationError(f"Unknown encoder nonlinearity {nonlinearity!r}")


def conv_encoder_features(params: Mapping[str, torch.Tensor], frames: torch.Tensor, spec: EncoderSpec,
                          prefix: str = "encoder") -> torch.Tensor:
    """Conv stack only: (..., C, H, W) -> (..., filters, H', W')"""
    expected = (spec.in_channels, spec.frame_size, spec.frame_size)
    if frames.dim() < 3 or tuple(frames.shape[-3:]) != expected:
        raise ConfigurationError(f"Encoder expects frames of shape {expected}, got {tuple(frames.shape)}")
    lead = frames.shape[:-3]
    h = frames.reshape(-1, *expected)
    for layer in range(spec.num_layers):
        h = F.conv2d(
            h,
            params[f"{prefix}.conv.{layer}.weight"],
            params[f"{prefix}.conv.{layer}.bias"],
            stride=spec.stride(layer),
        )
        h = _activate(h, spec.nonlinearity)
    return h.reshape(*lead, *h.shape[1:])


def conv_encoder_forward(params: Mapping[str, torch.Tensor], frame: torch.Tensor, spec: EncoderSpec,
                         prefix: str = "encoder") -> torch.Tensor:
    """Frame(s) (..., C, H, W) -> latent (..., latent_dim)"""
    features = conv_encoder_features(params, frame, spec, prefix)
    flat = features.flatten(start_dim=-3)
    return F.linear(flat, params[f"{prefix}.fc.weight"], params[f"{prefix}.fc.bias"])


# ---------------------------------------------------------------------------
# Normalization and recurrence

def layer_norm(v: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    if gain.shape[-1] != v.shape[-1] or bias.shape[-1] != v.shape[-1]:
        raise ConfigurationError(
            f"layer_norm dimension mismatch: input {v.shape[-1]}, gain {gain.shape[-1]}, bias {bias.shape[-1]}"
        )
    return F.layer_norm(v, (v.shape[-1],), gain, bias, eps)


@dataclass
class RecurrentState:
    hidden: torch.Tensor
    cell: torch.Tensor

    @classmethod
    def zeros(cls, hidden_size: int, batch_shape: Sequence[int] = (), dtype: torch.dtype = torch.float32):
        shape = (*batch_shape, hidden_size)
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))


def init_lstm(prefix: str, input_size: int, hidden_size: int, generator: torch.Generator,
              dtype: torch.dtype = torch.float32) -> ParamSet:
    return {
        f"{prefix}.weight_ih": _orthogonal((4 * hidden_size, input_size), generator, dtype).requires_grad_(True),
        f"{prefix}.weight_hh": _orthogonal((4 * hidden_size, hidden_size), generator, dtype).requires_grad_(True),
        f"{prefix}.bias_ih": torch.zeros(4 * hidden_size, dtype=dtype, requires_grad=True),
        f"{prefix}.bias_hh": torch.zeros(4 * hidden_size, dtype=dtype, requires_grad=True),
    }


def recurrent_step(params: Mapping[str, torch.Tensor], x: torch.Tensor, state: RecurrentState,
                   prefix: str = "lstm") -> RecurrentState:
    """One LSTM step; gate order (input, forget, candidate, output)"""
    w_ih = params[f"{prefix}.weight_ih"]
    w_hh = params[f"{prefix}.weight_hh"]
    if x.shape[-1] != w_ih.shape[1]:
        raise ConfigurationError(f"{prefix} expects input dimension {w_ih.shape[1]}, got {x.shape[-1]}")
    if state.hidden.shape[-1] != w_hh.shape[1]:
        raise ConfigurationError(f"{prefix} hidden size is {w_hh.shape[1]}, state has {state.hidden.shape[-1]}")
    gates = F.linear(x, w_ih, params[f"{prefix}.bias_ih"]) + F.linear(state.hidden, w_hh, params[f"{prefix}.bias_hh"])
    i, f, g, o = gates.chunk(4, dim=-1)
    cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
    hidden = torch.sigmoid(o) * torch.tanh(cell)
    return RecurrentState(hidden=hidden, cell=cell)


# ---------------------------------------------------------------------------
# Gradients and optimization

def backward(loss_fn: Callable[[ParamSet], torch.Tensor], params: ParamSet,
             path: str | None = None) -> tuple[float, GradSet]:
    """
    Evaluate loss_fn(params) and its reverse-mode gradient.

    Only tensors with requires_grad contribute; parameters the loss does not
    reach are omitted from the GradSet (exactly-zero gradient).
    """
    label = path or getattr(loss_fn, "__qualname__", "loss")
    loss = loss_fn(params)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(label, value)
    keys = [k for k, v in params.items() if v.requires_grad]
    if not loss.requires_grad or not keys:
        return value, {}
    grads = torch.autograd.grad(loss, [params[k] for k in keys], allow_unused=True)
    return value, {k: g for k, g in zip(keys, grads) if g is not None}


class OptimState:
    """Adam moments + step counter for one parameter group"""

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, name: str = "optim"):
        self.name = name
        self.keys = list(params)
        self.step_count = 0
        self.optimizer = torch.optim.Adam(
            [params[k] for k in self.keys], lr=lr, betas=tuple(betas), eps=eps, foreach=False
        )

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    @property
    def betas(self) -> tuple[float, float]:
        return self.optimizer.param_groups[0]["betas"]

    def moments(self, params: ParamSet, key: str) -> tuple[torch.Tensor, torch.Tensor]:
        state = self.optimizer.state.get(params[key], {})
        if not state:
            zeros = torch.zeros_like(params[key])
            return zeros, zeros.clone()
        return state["exp_avg"], state["exp_avg_sq"]

    def state_dict(self) -> dict:
        return {"name": self.name, "keys": self.keys, "step_count": self.step_count,
                "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        if list(state["keys"]) != self.keys:
            raise CheckpointError(f"Optimizer {self.name}: parameter keys do not match checkpoint")
        self.step_count = int(state["step_count"])
        self.optimizer.load_state_dict(state["optimizer"])


def adam_step(params: ParamSet, grads: GradSet, state: OptimState) -> tuple[ParamSet, OptimState]:
    """Bias-corrected Adam update, in place; returns the same objects"""
    if set(params) != set(state.keys):
        raise ConfigurationError(f"Optimizer {state.name} was built for a different ParamSet")
    for key in state.keys:
        param = params[key]
        grad = grads.get(key)
        if grad is None:
            grad = torch.zeros_like(param)
        elif grad.shape != param.shape:
            raise ConfigurationError(
                f"Gradient for {key} has shape {tuple(grad.shape)}, parameter has {tuple(param.shape)}"
            )
        param.grad = grad.detach().to(param.dtype)
    state.optimizer.step()
    for key in state.keys:
        params[key].grad = None
    state.step_count += 1
    for key in state.keys:
        if not bool(torch.isfinite(params[key]).all()):
            raise NonFiniteLossError(f"adam_step/{state.name}/{key}", float("nan"))
    return params, state


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path: str | Path, params: Mapping[str, ParamSet],
                    optimizers: Mapping[str, OptimState] | None = None, **metadata) -> Path:
    """Versioned container: parameter groups, optimizer states, free-form metadata"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "params": {group: {k: v.detach().cpu().clone() for k, v in ps.items()} for group, ps in params.items()},
        "optim": {group: opt.state_dict() for group, opt in (optimizers or {}).items()},
        "metadata": metadata,
    }
    torch.save(payload, path)
    logger.debug(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint format version {version!r} in {path}")
    return payload


def restore_params_(target: ParamSet, saved: Mapping[str, torch.Tensor]) -> None:
    _check_keyspace(target, saved, "restore_params_")
    with torch.no_grad():
        for key, value in saved.items():
            if value.shape != target[key].shape:
                raise CheckpointError(f"Shape mismatch for {key}: {tuple(value.shape)} vs {tuple(target[key].shape)}")
            target[key].copy_(value.to(target[key].dtype))
