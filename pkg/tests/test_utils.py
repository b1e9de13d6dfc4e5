import logging
import pickle

import pytest

from config import Config
from flare.utils.errors import (
    ConfigurationError,
    FlareError,
    InsufficientDataError,
    NonFiniteLossError,
    TrainingAborted,
)
from flare.utils.logging_config import current_run, run_context, setup_logging, suite_log


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


def test_setup_logging_writes_both_files(tmp_path, restore_root_logger):
    setup_logging("DEBUG", tmp_path)
    logging.getLogger("flare.test").error("boom")
    logging.getLogger("flare.test").debug("detail")
    for handler in logging.getLogger().handlers:
        handler.flush()

    main_log = (tmp_path / "flare.log").read_text(encoding="utf-8")
    errors_log = (tmp_path / "errors.log").read_text(encoding="utf-8")
    assert "boom" in main_log and "detail" in main_log
    assert "boom" in errors_log and "detail" not in errors_log
    assert logging.getLogger("matplotlib").level == logging.WARNING


def flush_root():
    for handler in logging.getLogger().handlers:
        handler.flush()


def test_records_carry_the_run_they_belong_to(tmp_path, restore_root_logger):
    setup_logging("INFO", tmp_path)
    log = logging.getLogger("flare.test")
    log.info("outside")
    with run_context("motivation/StateFlare/seed0"):
        assert current_run() == "motivation/StateFlare/seed0"
        log.info("inside")
    assert current_run() == "-"
    flush_root()
    text = (tmp_path / "flare.log").read_text(encoding="utf-8")
    assert "[-] outside" in text
    assert "[motivation/StateFlare/seed0] inside" in text


def test_suite_log_mirrors_only_the_suite(tmp_path, restore_root_logger):
    setup_logging("INFO", tmp_path / "logs")
    log = logging.getLogger("flare.test")
    with suite_log(tmp_path / "out", "discrete") as path:
        log.info("planning")
        with run_context("discrete/FlareDQN/seed1"):
            log.warning("diverging")
    log.info("afterwards")
    flush_root()

    text = path.read_text(encoding="utf-8")
    assert path == tmp_path / "out" / "suite.log"
    assert "[discrete] planning" in text
    assert "[discrete/FlareDQN/seed1] diverging" in text
    assert "afterwards" not in text
    assert len(logging.getLogger().handlers) == 3
    assert "afterwards" in (tmp_path / "logs" / "flare.log").read_text(encoding="utf-8")


@pytest.mark.parametrize("error", [
    NonFiniteLossError("critic.q1", float("nan")),
    InsufficientDataError(3, 128),
    TrainingAborted("non-finite loss", "runs/diagnostic.pt"),
    ConfigurationError("layer mlp.0 expects 3 inputs"),
])
def test_errors_survive_pickling(error):
    clone = pickle.loads(pickle.dumps(error))
    assert type(clone) is type(error)
    assert str(clone) == str(error)
    assert isinstance(clone, FlareError)


def test_error_messages_carry_context():
    assert "critic.q1" in str(NonFiniteLossError("critic.q1", float("inf")))
    assert "initial steps" in str(InsufficientDataError(3, 128))
    assert TrainingAborted("x", "d.pt").snapshot_path == "d.pt"
    assert isinstance(ConfigurationError("bad"), ValueError)


def test_config_defaults(monkeypatch):
    assert Config.validate()
    assert Config.get_output_root("/tmp/elsewhere") == "/tmp/elsewhere"
    assert Config.get_output_root() == Config.OUTPUT_ROOT
    monkeypatch.setattr(Config, "WORKERS", 0)
    with pytest.raises(ValueError):
        Config.validate()
