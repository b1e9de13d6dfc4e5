#!/usr/bin/env python3
"""
Logging for flare experiments.

Every record carries the run it belongs to (`suite/variant/seedN`, the bare
suite id between runs, or `-` outside any run), so one log file can hold many
interleaved runs and still be filtered per run. A suite additionally mirrors
its records into `<output_dir>/suite.log` next to its run logs.
"""

import contextvars
import logging
import logging.handlers
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - [%(run)s] %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
SUITE_LOG_NAME = "suite.log"

_current_run: contextvars.ContextVar[str] = contextvars.ContextVar("flare_run", default="-")


class UTCFormatter(logging.Formatter):
    """Formatter that stamps records in UTC"""

    def formatTime(self, record, datefmt=None):
        dt = datetime.fromtimestamp(record.created, tz=timezone.utc)
        if datefmt:
            return dt.strftime(datefmt)
        return dt.strftime('%Y-%m-%d %H:%M:%S %Z')


class RunContextFilter(logging.Filter):
    def filter(self, record):
        record.run = _current_run.get()
        return True


def _handler(handler: logging.Handler, level: int) -> logging.Handler:
    handler.setLevel(level)
    handler.setFormatter(UTCFormatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    handler.addFilter(RunContextFilter())
    return handler


def current_run() -> str:
    return _current_run.get()


@contextmanager
def run_context(label: str) -> Iterator[str]:
    """Tag records emitted inside the block with `label`"""
    token = _current_run.set(label)
    try:
        yield label
    finally:
        _current_run.reset(token)


@contextmanager
def suite_log(output_dir: str | Path, suite: str, level: int = logging.INFO) -> Iterator[Path]:
    """Append the suite's records to <output_dir>/suite.log while the block runs"""
    path = Path(output_dir) / SUITE_LOG_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = _handler(logging.FileHandler(path, mode="a", encoding="utf-8"), level)
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        with run_context(suite):
            yield path
    finally:
        root.removeHandler(handler)
        handler.close()


def setup_logging(log_level=None, log_dir=None):
    """
    Configure console + rotating file logging.

    Args:
        log_level: logging level (defaults to Config.LOG_LEVEL)
        log_dir: directory for flare.log and errors.log (defaults to Config.LOG_DIR)
    """
    # Imported here to avoid a circular import through config
    from config import Config

    if log_level is None:
        log_level = getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO)
    elif isinstance(log_level, str):
        log_level = getattr(logging, log_level.upper(), logging.INFO)
    log_path = Path(log_dir if log_dir is not None else Config.LOG_DIR)
    log_path.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    root_logger.handlers.clear()
    root_logger.addHandler(_handler(logging.StreamHandler(), log_level))
    # 10MB x 5 for everything, 5MB x 3 for failed runs and divergences
    root_logger.addHandler(_handler(logging.handlers.RotatingFileHandler(
        log_path / "flare.log", maxBytes=10 * 1024 * 1024, backupCount=5, encoding='utf-8'), log_level))
    root_logger.addHandler(_handler(logging.handlers.RotatingFileHandler(
        log_path / "errors.log", maxBytes=5 * 1024 * 1024, backupCount=3, encoding='utf-8'), logging.ERROR))

    logging.getLogger('matplotlib').setLevel(logging.WARNING)
    logging.getLogger('PIL').setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.info(f"Logging configured. Level: {logging.getLevelName(log_level)}, files in {log_path.absolute()}")
    return logger


def log_system_info():
    """Log interpreter and numerical stack versions"""
    logger = logging.getLogger(__name__)

    import platform
    import sys

    import gymnasium
    import numpy
    import torch

    logger.info("=== SYSTEM INFO ===")
    logger.info(f"Platform: {platform.platform()}")
    logger.info(f"Python: {sys.version.split()[0]}")
    logger.info(f"numpy: {numpy.__version__}, torch: {torch.__version__}, gymnasium: {gymnasium.__version__}")
    logger.info(f"torch threads: {torch.get_num_threads()}")
    logger.info("===================")
