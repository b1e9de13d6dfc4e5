import logging
import sqlite3
from datetime import datetime, timezone
from typing import Dict, List, Optional

from db.init_db import init_db

logger = logging.getLogger(__name__)

RUN_STATUSES = ("running", "completed", "failed", "aborted")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunRegistry:
    """sqlite bookkeeping of every training run a suite launches"""

    def __init__(self, db_path: str = "db/runs.db"):
        self.db_path = db_path
        init_db(db_path)

    def start_run(self, run_id: str, suite: str, variant: str, seed: int, csv_path: str) -> None:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute("""
            INSERT OR REPLACE INTO runs (run_id, suite, variant, seed, status, csv_path, final_return,
                                         started_at, finished_at)
            VALUES (?, ?, ?, ?, 'running', ?, NULL, ?, NULL)
        """, (run_id, suite, variant, int(seed), csv_path, _now()))
        conn.commit()
        conn.close()

    def finish_run(self, run_id: str, status: str, final_return: Optional[float] = None) -> None:
        if status not in RUN_STATUSES:
            raise ValueError(f"Unknown run status {status!r}; expected one of {RUN_STATUSES}")
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute("""
            UPDATE runs SET status = ?, final_return = ?, finished_at = ? WHERE run_id = ?
        """, (status, final_return, _now(), run_id))
        conn.commit()
        conn.close()

    def get_run(self, run_id: str) -> Optional[Dict]:
        try:
            conn = sqlite3.connect(self.db_path)
            conn.row_factory = sqlite3.Row
            row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
            conn.close()
            return dict(row) if row else None
        except Exception as e:
            logger.error(f"Error reading run {run_id}: {e}")
            return None

    def runs_for_suite(self, suite: str) -> List[Dict]:
        try:
            conn = sqlite3.connect(self.db_path)
            conn.row_factory = sqlite3.Row
            rows = conn.execute("""
                SELECT * FROM runs WHERE suite = ? ORDER BY variant, seed
            """, (suite,)).fetchall()
            conn.close()
            return [dict(row) for row in rows]
        except Exception as e:
            logger.error(f"Error listing runs of suite {suite}: {e}")
            return []

    def suite_complete(self, suite: str) -> bool:
        runs = self.runs_for_suite(suite)
        return bool(runs) and all(run["status"] == "completed" for run in runs)

    def set_metadata(self, key: str, value: str) -> None:
        conn = sqlite3.connect(self.db_path)
        conn.execute("INSERT OR REPLACE INTO registry_metadata (key, value) VALUES (?, ?)", (key, value))
        conn.commit()
        conn.close()

    def get_metadata(self, key: str) -> Optional[str]:
        try:
            conn = sqlite3.connect(self.db_path)
            row = conn.execute("SELECT value FROM registry_metadata WHERE key = ?", (key,)).fetchone()
            conn.close()
            return row[0] if row else None
        except Exception:
            return None
