
import numpy as np
import pytest
import torch

from config import Config
from flare.services.nn import ParamSet


def pytest_collection_modifyitems(config, items):
    if Config.RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason="slow; set FLARE_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield torch.float64
    torch.set_default_dtype(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def tmp_output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setattr(Config, "OUTPUT_ROOT", str(root))
    monkeypatch.setattr(Config, "DB_PATH", str(tmp_path / "runs.db"))
    return root


def randomize(params: ParamSet, seed: int, scale: float = 0.5) -> ParamSet:
    """Replace every tensor with seeded normal noise (keeps requires_grad)"""
    g = torch.Generator().manual_seed(seed)
    return {
        k: (scale * torch.randn(v.shape, generator=g, dtype=v.dtype)).requires_grad_(v.requires_grad)
        for k, v in params.items()
    }


def finite_difference_check(loss_fn, params: ParamSet, grads: ParamSet, h: float = 1e-5) -> float:
    """Norm-wise relative error between analytic grads and central differences"""
    numeric, analytic = [], []
    with torch.no_grad():
        for key, value in params.items():
            if not value.requires_grad:
                continue
            flat = value.view(-1)
            estimate = torch.zeros_like(flat)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                up = float(loss_fn(params))
                flat[i] = original - h
                down = float(loss_fn(params))
                flat[i] = original
                estimate[i] = (up - down) / (2 * h)
            numeric.append(estimate)
            analytic.append(grads.get(key, torch.zeros_like(value)).reshape(-1))
    numeric = torch.cat(numeric)
    analytic = torch.cat(analytic)
    scale = max(float(numeric.norm()), float(analytic.norm()), 1e-12)
    return float((numeric - analytic).norm()) / scale
