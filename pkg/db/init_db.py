import logging
import sqlite3
from pathlib import Path

logger = logging.getLogger(__name__)


def init_db(db_path: str = "db/runs.db"):
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()

    cursor.execute("""
        CREATE TABLE IF NOT EXISTS runs (
            run_id TEXT PRIMARY KEY,
            suite TEXT,
            variant TEXT,
            seed INTEGER,
            status TEXT,
            csv_path TEXT,
            final_return REAL,
            started_at TEXT,
            finished_at TEXT
        )
    """)

    # registry-wide key/value facts (last suite, schema version)
    cursor.execute("""
        CREATE TABLE IF NOT EXISTS registry_metadata (
            key TEXT PRIMARY KEY,
            value TEXT
        )
    """)

    conn.commit()
    conn.close()
    logger.info(f"Run registry initialized at {db_path}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    init_db()
