import pytest
import torch

from flare.services.flare_core import (
    HEAD_PREFIX,
    Representation,
    RepresentationMode,
    apply_head,
    build_representation,
    encode_frames,
    fuse,
    latent_flow,
    linearization_check,
    pixel_flow_preprocess,
    representation_parameter_count,
    state_flare_features,
)
from flare.services.nn import EncoderSpec, backward, count_parameters, init_conv_encoder
from flare.utils.errors import ConfigurationError
from tests.conftest import finite_difference_check, randomize

SMALL = EncoderSpec(frame_size=16, num_layers=2, filters=4, latent_dim=64)
TINY = EncoderSpec(frame_size=8, num_layers=2, filters=2, latent_dim=3)


def pixel_rep(mode, n, head_width=32, spec=SMALL):
    return Representation(mode, n, (1, 16, 16), encoder=spec, head_width=head_width)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_flare_pre_head_dimension(n, generator):
    rep = pixel_rep(RepresentationMode.FLARE_PIXEL, n)
    assert rep.pre_head_dim == 2 * (n - 1) * 64
    params = rep.init_params(generator)
    assert params[f"{HEAD_PREFIX}.fc.weight"].shape == (32, 2 * (n - 1) * 64)
    feature = rep(params, torch.rand(3, n, 1, 16, 16, generator=generator))
    assert feature.shape == (3, 32)


@pytest.mark.parametrize("mode,n,expected", [
    (RepresentationMode.LATENT_CONCAT_PIXEL, 3, 3 * 64),
    (RepresentationMode.FRAME_STACK_PIXEL, 3, 64),
    (RepresentationMode.PIXEL_FLOW, 3, 64),
    (RepresentationMode.FRAME_STACK_PIXEL, 1, 64),
])
def test_other_pixel_modes_dimensions(mode, n, expected, generator):
    rep = pixel_rep(mode, n)
    assert rep.pre_head_dim == expected
    params = rep.init_params(generator)
    assert rep(params, torch.rand(n, 1, 16, 16, generator=generator)).shape == (32,)


@pytest.mark.parametrize("mode,n", [
    (RepresentationMode.FLARE_PIXEL, 3),
    (RepresentationMode.LATENT_CONCAT_PIXEL, 3),
    (RepresentationMode.FRAME_STACK_PIXEL, 3),
    (RepresentationMode.PIXEL_FLOW, 2),
    (RepresentationMode.STATE_RECURRENT, 4),
])
def test_parameter_count_matches_allocation(mode, n, generator):
    if mode.is_pixel:
        rep = pixel_rep(mode, n)
    else:
        rep = Representation(mode, n, (2,))
    assert representation_parameter_count(rep) == count_parameters(rep.init_params(generator))


def test_pixel_flow_channels():
    frames = torch.arange(3.0).reshape(3, 1, 1, 1).expand(3, 1, 16, 16)
    out = pixel_flow_preprocess(frames)
    assert out.shape == (5, 16, 16)
    assert out[:, 0, 0].tolist() == [0.0, 1.0, 2.0, 1.0, 1.0]
    assert pixel_rep(RepresentationMode.PIXEL_FLOW, 3).frame_encoder_spec.in_channels == 5


def test_state_flare_scalar_example():
    out = state_flare_features(torch.tensor([0.0, 1.0, 3.0, 6.0]))
    assert out.tolist() == [6.0, 3.0, 2.0, 1.0]


def test_state_flare_batched_vectors():
    positions = torch.tensor([[[0.0, 0.0], [1.0, 2.0], [3.0, 4.0], [6.0, 8.0]]]).expand(5, 4, 2)
    out = state_flare_features(positions)
    assert out.shape == (5, 8)
    assert out[0].tolist() == [6.0, 8.0, 3.0, 4.0, 2.0, 2.0, 1.0, 2.0]


@pytest.mark.parametrize("mode,dim", [
    (RepresentationMode.STATE_FULL, 3),
    (RepresentationMode.STATE_STACK, 12),
    (RepresentationMode.STATE_FLARE, 12),
    (RepresentationMode.STATE_RECURRENT, 9),
])
def test_state_mode_feature_dims(mode, dim, generator):
    n = 1 if mode is RepresentationMode.STATE_FULL else 4
    rep = Representation(mode, n, (3,))
    assert rep.feature_dim == dim
    out = rep(rep.init_params(generator), torch.rand(7, n, 3, generator=generator))
    assert out.shape == (7, dim)


def test_state_full_uses_current_observation():
    rep = Representation(RepresentationMode.STATE_FULL, 1, (3,))
    window = torch.tensor([[1.0, 2.0, 3.0]])
    assert torch.equal(rep({}, window), torch.tensor([1.0, 2.0, 3.0]))


def test_latent_flow_subtracts_previous():
    z = torch.tensor([[1.0, 1.0], [3.0, 0.0], [6.0, 2.0]])
    assert latent_flow(z).tolist() == [[2.0, -1.0], [3.0, 2.0]]


def test_flow_gradient_matches_injected_constant(generator, double_precision):
    rep = pixel_rep(RepresentationMode.FLARE_PIXEL, 3)
    params = randomize(rep.init_params(generator, torch.float64), seed=3, scale=0.2)
    frames = torch.rand(2, 3, 1, 16, 16, generator=generator, dtype=torch.float64)
    spec = rep.frame_encoder_spec
    constant = encode_frames(params, frames, spec).detach()

    def marked(ps):
        return rep(ps, frames).pow(2).sum()

    def injected(ps):
        latents = encode_frames(ps, frames, spec)
        flows = latents[..., 1:, :] - constant[..., :-1, :]
        return fuse(latents, flows, ps).pow(2).sum()

    def undetached(ps):
        latents = encode_frames(ps, frames, spec)
        return fuse(latents, latent_flow(latents, detach=False), ps).pow(2).sum()

    _, g_marked = backward(marked, params)
    _, g_injected = backward(injected, params)
    _, g_full = backward(undetached, params)
    for key in params:
        assert torch.allclose(g_marked[key], g_injected[key], atol=1e-10)
    encoder_keys = [k for k in params if k.startswith("encoder.conv")]
    diff = sum(float((g_marked[k] - g_full[k]).norm()) for k in encoder_keys)
    scale = sum(float(g_marked[k].norm()) for k in encoder_keys)
    assert diff / scale > 1e-3


def test_head_output_is_layer_normalized(generator):
    rep = pixel_rep(RepresentationMode.LATENT_CONCAT_PIXEL, 2)
    params = randomize(rep.init_params(generator), seed=1)
    for key in (f"{HEAD_PREFIX}.ln.gain", f"{HEAD_PREFIX}.ln.bias"):
        params[key] = rep.init_params(generator)[key]
    out = rep(params, torch.rand(4, 2, 1, 16, 16, generator=generator))
    assert torch.allclose(out.mean(dim=-1), torch.zeros(4), atol=1e-4)


def test_apply_head_dimension_check(generator):
    rep = pixel_rep(RepresentationMode.LATENT_CONCAT_PIXEL, 2)
    params = rep.init_params(generator)
    with pytest.raises(ConfigurationError):
        apply_head(params, torch.zeros(10))


def test_fuse_rejects_wrong_flow_count(generator):
    rep = pixel_rep(RepresentationMode.FLARE_PIXEL, 3)
    params = rep.init_params(generator)
    with pytest.raises(ConfigurationError):
        fuse(torch.zeros(3, 64), torch.zeros(3, 64), params)


@pytest.mark.parametrize("mode,n,shape", [
    (RepresentationMode.FLARE_PIXEL, 1, (1, 16, 16)),
    (RepresentationMode.STATE_FLARE, 3, (2,)),
    (RepresentationMode.STATE_FULL, 2, (3,)),
    (RepresentationMode.FLARE_PIXEL, 2, (1, 20, 20)),
    (RepresentationMode.STATE_STACK, 4, (1, 16, 16)),
])
def test_invalid_representations(mode, n, shape):
    with pytest.raises(ConfigurationError):
        Representation(mode, n, shape, encoder=SMALL)


def test_window_shape_is_checked(generator):
    rep = pixel_rep(RepresentationMode.FLARE_PIXEL, 3)
    params = rep.init_params(generator)
    with pytest.raises(ConfigurationError):
        rep(params, torch.zeros(2, 1, 16, 16))
    with pytest.raises(ConfigurationError):
        build_representation(RepresentationMode.LATENT_CONCAT_PIXEL, torch.zeros(3, 1, 16, 16), params, rep)


def test_linearization_exact_for_affine_encoder(generator, double_precision):
    spec = EncoderSpec(frame_size=16, num_layers=2, filters=4, latent_dim=8, nonlinearity="identity")
    params = randomize(init_conv_encoder(spec, generator, dtype=torch.float64), seed=2)
    frame = torch.rand(1, 16, 16, generator=generator, dtype=torch.float64)
    delta = 0.3 * torch.randn(1, 16, 16, generator=generator, dtype=torch.float64)
    report = linearization_check(params, frame, delta, spec)
    assert report.relative_error < 1e-10
    assert report.passed


def test_linearization_small_step_relu_encoder(generator, double_precision):
    spec = EncoderSpec(frame_size=16, num_layers=2, filters=4, latent_dim=8)
    params = randomize(init_conv_encoder(spec, generator, dtype=torch.float64), seed=4)
    frame = torch.rand(1, 16, 16, generator=generator, dtype=torch.float64)
    delta = 1e-6 * torch.randn(1, 16, 16, generator=generator, dtype=torch.float64)
    report = linearization_check(params, frame, delta, spec, tolerance=1e-2)
    assert report.passed
    assert report.delta_norm == pytest.approx(float(delta.norm()))


@pytest.mark.parametrize("seed", range(20))
def test_fusion_head_gradients_match_finite_differences(seed, double_precision):
    rep = Representation(RepresentationMode.FLARE_PIXEL, 3, (1, 8, 8), encoder=TINY, head_width=4)
    g = torch.Generator().manual_seed(seed)
    params = randomize(rep.init_params(g, torch.float64), seed)
    # the previous latent is cut from the graph, so only the head has exact gradients
    params = {k: v.detach().requires_grad_(k.startswith(HEAD_PREFIX)) for k, v in params.items()}
    frames = torch.rand(2, 3, 1, 8, 8, generator=g, dtype=torch.float64)
    weights = torch.randn(2, 4, generator=g, dtype=torch.float64)

    def loss_fn(ps):
        return (rep(ps, frames) * weights).sum()

    _, grads = backward(loss_fn, params)
    assert set(grads) == {k for k in params if k.startswith(HEAD_PREFIX)}
    assert finite_difference_check(loss_fn, params, grads) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_frame_stack_encoder_gradients_match_finite_differences(seed, double_precision):
    rep = Representation(RepresentationMode.FRAME_STACK_PIXEL, 3, (1, 8, 8), encoder=TINY, head_width=4)
    g = torch.Generator().manual_seed(seed)
    params = randomize(rep.init_params(g, torch.float64), seed)
    assert params["encoder.conv.0.weight"].shape[1] == 3
    frames = torch.rand(2, 3, 1, 8, 8, generator=g, dtype=torch.float64)
    weights = torch.randn(2, 4, generator=g, dtype=torch.float64)

    def loss_fn(ps):
        return (rep(ps, frames) * weights).sum()

    _, grads = backward(loss_fn, params)
    assert finite_difference_check(loss_fn, params, grads) < 1e-4
