"""Full-budget orderings and shortened smoke runs of the shipped suites (FLARE_RUN_SLOW=1)."""

from pathlib import Path

import pytest

from flare.services.suites import SUITE_IDS, run_suite

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"
SMOKE_OVERRIDES = {
    "total_steps": 3000,
    "eval_episodes": 2,
    "replay_capacity": 5000,
    "sac": {"batch_size": 32, "hidden_dim": 64},
    "dqn": {"batch_size": 32, "hidden_dim": 64},
    "encoder": {"head_width": 64},
}


@pytest.mark.slow
@pytest.mark.parametrize("suite", SUITE_IDS)
def test_suite_smoke(suite, tmp_output_root):
    result = run_suite(suite, [0, 1], tmp_output_root, workers=1, overrides=SMOKE_OVERRIDES, config_dir=CONFIG_DIR)
    assert result.complete
    assert (tmp_output_root / suite / "summary.csv").exists()


@pytest.mark.slow
@pytest.mark.parametrize("suite", SUITE_IDS)
def test_suite_ordering_holds(suite, tmp_output_root):
    result = run_suite(suite, None, tmp_output_root, config_dir=CONFIG_DIR)
    assert result.complete
    failed = [f"{v.name}: {v.detail}" for v in result.verdicts if not v.passed]
    assert not failed, failed
