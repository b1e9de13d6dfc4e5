from pathlib import Path

import pytest
import yaml

from flare.services.flare_core import RepresentationMode
from flare.services.run_config import (
    RunConfig,
    deep_merge,
    dump_run_config,
    load_config_document,
    load_run_config,
    parse_run_config,
)
from flare.utils.errors import ConfigurationError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def write(path: Path, document) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(document), encoding="utf-8")
    return path


def test_defaults_are_valid():
    config = RunConfig()
    assert config.mode is RepresentationMode.STATE_FULL
    assert config.learner == "sac"
    assert config.optim.alpha_betas == (0.5, 0.999)
    assert config.encoder_frame_size == 64


def test_deep_merge_overrides_nested_keys():
    merged = deep_merge({"a": {"x": 1, "y": 2}, "b": [1]}, {"a": {"y": 3}, "b": [2, 3]})
    assert merged == {"a": {"x": 1, "y": 3}, "b": [2, 3]}


def test_include_is_merged_under_including_file(tmp_path):
    write(tmp_path / "base.yaml", {"total_steps": 1000, "initial_steps": 200, "sac": {"batch_size": 64}})
    child = write(tmp_path / "child.yaml", {"include": "base.yaml", "sac": {"hidden_dim": 32}, "name": "child"})
    config = load_run_config(child)
    assert config.total_steps == 1000
    assert config.sac.batch_size == 64
    assert config.sac.hidden_dim == 32
    assert config.name == "child"


def test_include_cycle_is_reported(tmp_path):
    write(tmp_path / "a.yaml", {"include": ["b.yaml"]})
    write(tmp_path / "b.yaml", {"include": ["a.yaml"]})
    with pytest.raises(ConfigurationError, match="cycle"):
        load_config_document(tmp_path / "a.yaml")


def test_missing_include_is_reported(tmp_path):
    path = write(tmp_path / "a.yaml", {"include": ["nowhere.yaml"]})
    with pytest.raises(ConfigurationError, match="not found"):
        load_config_document(path)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigurationError):
        parse_run_config({"sac": {"batchsize": 10}})
    with pytest.raises(ConfigurationError):
        parse_run_config({"learning_rate": 0.1})


@pytest.mark.parametrize("document", [
    {"learner": "dqn"},
    {"env": {"id": "dot_catch"}, "learner": "sac"},
    {"mode": "StateFlare", "n_frames": 2},
    {"mode": "FlarePixel", "n_frames": 1},
    {"mode": "StateFull", "n_frames": 3},
    {"total_steps": 10, "initial_steps": 20},
    {"seeds": []},
    {"sac": {"log_std_min": 3.0, "log_std_max": 2.0}},
    {"optim": {"betas": [0.9, 1.0]}},
    {"mode": "NoSuchMode"},
])
def test_inconsistent_configs_are_rejected(document):
    with pytest.raises(ConfigurationError):
        parse_run_config(document)


@pytest.mark.parametrize("document", [
    {"initial_steps": 10, "action_repeat": 2, "sac": {"batch_size": 8}},
    {"initial_steps": 0, "sac": {"batch_size": 1}},
    {"env": {"id": "dot_catch"}, "learner": "dqn", "mode": "FlarePixel", "n_frames": 3,
     "initial_steps": 31, "action_repeat": 1, "dqn": {"batch_size": 32}},
    {"replay_capacity": 64, "sac": {"batch_size": 128}},
])
def test_warm_up_must_fill_one_batch(document):
    with pytest.raises(ConfigurationError, match="batch_size"):
        parse_run_config(document)


def test_warm_up_counts_agent_steps():
    config = parse_run_config({"initial_steps": 15, "action_repeat": 2, "sac": {"batch_size": 8}})
    assert config.warm_up_transitions == 8
    assert config.batch_size == 8
    dqn = parse_run_config({"env": {"id": "dot_catch"}, "learner": "dqn", "mode": "FlarePixel", "n_frames": 3,
                            "initial_steps": 32, "action_repeat": 1})
    assert dqn.batch_size == dqn.dqn.batch_size == 32


def test_pixel_config_uses_augmented_canvas():
    config = parse_run_config({"mode": "FlarePixel", "n_frames": 2, "env": {"frame_size": 32},
                               "augment": {"pad": 4}})
    assert config.uses_augmentation
    assert config.encoder_frame_size == 36
    off = parse_run_config({"mode": "FlarePixel", "n_frames": 2, "augment": {"enabled": False}})
    assert not off.uses_augmentation
    assert off.encoder_frame_size == 64


def test_dump_and_reload_roundtrip(tmp_path):
    config = parse_run_config({"name": "x", "mode": "LatentConcatPixel", "n_frames": 3, "seeds": [4, 5]})
    path = dump_run_config(config, tmp_path / "out" / "config.yaml")
    assert load_run_config(path) == config


def test_overrides_win(tmp_path):
    path = write(tmp_path / "a.yaml", {"total_steps": 1000})
    config = load_run_config(path, {"total_steps": 500, "initial_steps": 256})
    assert config.total_steps == 500


@pytest.mark.parametrize("name", ["base_state.yaml", "base_pixel.yaml", "base_discrete.yaml"])
def test_shipped_base_configs_load(name):
    config = load_run_config(CONFIG_DIR / name)
    if config.env.discrete:
        assert config.learner == "dqn"
        assert not config.uses_augmentation
    else:
        assert config.learner == "sac"
