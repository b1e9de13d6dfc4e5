import pytest

from flare.services.registry import RunRegistry


@pytest.fixture
def registry(tmp_path):
    return RunRegistry(str(tmp_path / "db" / "runs.db"))


def test_run_lifecycle(registry):
    registry.start_run("motivation/StateFull/seed0", "motivation", "StateFull", 0, "runs/x.csv")
    run = registry.get_run("motivation/StateFull/seed0")
    assert run["status"] == "running"
    assert run["final_return"] is None
    assert run["started_at"]

    registry.finish_run("motivation/StateFull/seed0", "completed", 12.5)
    run = registry.get_run("motivation/StateFull/seed0")
    assert run["status"] == "completed"
    assert run["final_return"] == 12.5
    assert run["finished_at"]


def test_suite_completion(registry):
    assert not registry.suite_complete("discrete")
    for seed in (1, 0):
        registry.start_run(f"discrete/FlareDQN/seed{seed}", "discrete", "FlareDQN", seed, "")
    registry.finish_run("discrete/FlareDQN/seed0", "completed", 0.5)
    assert [r["seed"] for r in registry.runs_for_suite("discrete")] == [0, 1]
    assert not registry.suite_complete("discrete")
    registry.finish_run("discrete/FlareDQN/seed1", "completed", 0.7)
    assert registry.suite_complete("discrete")


def test_restarting_a_run_resets_it(registry):
    registry.start_run("a", "s", "v", 0, "")
    registry.finish_run("a", "failed")
    registry.start_run("a", "s", "v", 0, "")
    assert registry.get_run("a")["status"] == "running"


def test_unknown_status_rejected(registry):
    with pytest.raises(ValueError):
        registry.finish_run("a", "exploded")


def test_metadata(registry):
    assert registry.get_metadata("last_suite") is None
    registry.set_metadata("last_suite", "pixel_main")
    registry.set_metadata("last_suite", "discrete")
    assert registry.get_metadata("last_suite") == "discrete"


def test_missing_run(registry):
    assert registry.get_run("nope") is None
