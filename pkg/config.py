import os
from dotenv import load_dotenv

load_dotenv()


def _flag(name: str, default: str = "0") -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Config:
    # Application Settings
    OUTPUT_ROOT = os.getenv("FLARE_OUTPUT_ROOT", "runs")
    CONFIG_DIR = os.getenv("FLARE_CONFIG_DIR", "configs")
    DB_PATH = os.getenv("FLARE_DB_PATH", "db/runs.db")
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
    LOG_DIR = os.getenv("LOG_DIR", "logs")

    # Execution
    TORCH_THREADS = int(os.getenv("FLARE_TORCH_THREADS", "1"))
    WORKERS = int(os.getenv("FLARE_WORKERS", "1"))
    RECORD_WALL_TIME = _flag("FLARE_RECORD_WALL_TIME")
    RUN_SLOW_TESTS = _flag("FLARE_RUN_SLOW")

    @classmethod
    def get_output_root(cls, override: str | None = None) -> str:
        """Output root for run directories (CLI override wins over environment)"""
        return override or cls.OUTPUT_ROOT

    @classmethod
    def validate(cls):
        """Validate process-level configuration"""
        if cls.TORCH_THREADS < 1:
            raise ValueError("FLARE_TORCH_THREADS must be >= 1")
        if cls.WORKERS < 1:
            raise ValueError("FLARE_WORKERS must be >= 1")
        return True
