#!/usr/bin/env python3
"""
Command-line entry point for flare experiments: train, suite, plot, eval.
"""

import logging
import signal
import sys
import threading
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent))

from config import Config
from flare.utils.logging_config import log_system_info, setup_logging

setup_logging()
logger = logging.getLogger(__name__)


class ExperimentManager:
    def __init__(self):
        self.stop_event = threading.Event()
        self.registry = None

    def check_environment(self) -> bool:
        """Validate settings and prepare the run registry"""
        logger.info("🔍 Checking environment...")
        try:
            Config.validate()
        except ValueError as e:
            logger.error(f"❌ Invalid settings: {e}")
            return False

        if not Path(Config.CONFIG_DIR).is_dir():
            logger.warning(f"⚠️  Config directory {Config.CONFIG_DIR} not found; suite presets unavailable")

        try:
            from flare.services.registry import RunRegistry
            self.registry = RunRegistry(Config.DB_PATH)
        except Exception as e:
            logger.error(f"❌ Run registry initialization failed: {e}")
            return False

        import torch
        torch.set_num_threads(Config.TORCH_THREADS)
        Path(Config.OUTPUT_ROOT).mkdir(parents=True, exist_ok=True)
        logger.info("✅ Environment ready")
        return True

    def signal_handler(self, signum, frame):
        """Finish the current step, then stop"""
        logger.info(f"🛑 Signal {signum} received. Stopping after the current step...")
        self.stop_event.set()

    def run(self, argv) -> int:
        log_system_info()
        signal.signal(signal.SIGINT, self.signal_handler)
        signal.signal(signal.SIGTERM, self.signal_handler)

        if not self.check_environment():
            logger.error("❌ Environment check failed")
            return 1

        from flare.main import dispatch
        try:
            return dispatch(argv, self.stop_event, self.registry)
        except KeyboardInterrupt:
            logger.info("👋 Interrupted")
            return 130
        except Exception as e:
            logger.error(f"❌ Critical error: {e}")
            return 1


def main():
    manager = ExperimentManager()
    sys.exit(manager.run(sys.argv[1:]))


if __name__ == "__main__":
    main()
