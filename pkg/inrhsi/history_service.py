import json
import sqlite3
from datetime import datetime

from inrhsi.paths import output_path

HISTORY_DB = "run_history.db"
HISTORY_COLUMNS = {
    "status": "TEXT DEFAULT 'success'",
    "seed": "INTEGER",
    "wall_clock": "REAL DEFAULT 0",
    "manifest_path": "TEXT DEFAULT ''",
    "summary": "TEXT DEFAULT '{}'",
    "error_message": "TEXT DEFAULT ''",
}


def init_history_db(db_path=None):
    db_path = db_path or output_path(HISTORY_DB)
    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()
    cursor.execute(
        """
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY,
            date TEXT,
            command TEXT
        )
        """
    )
    cursor.execute("PRAGMA table_info(runs)")
    existing_columns = {row[1] for row in cursor.fetchall()}
    for column_name, definition in HISTORY_COLUMNS.items():
        if column_name not in existing_columns:
            cursor.execute(f"ALTER TABLE runs ADD COLUMN {column_name} {definition}")
    conn.commit()
    conn.close()


def save_run_entry(result, db_path=None):
    db_path = db_path or output_path(HISTORY_DB)
    init_history_db(db_path)
    conn = sqlite3.connect(db_path)
    cursor = conn.cursor()
    cursor.execute(
        """
        INSERT INTO runs (date, command, status, seed, wall_clock, manifest_path, summary, error_message)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """,
        (
            datetime.now().isoformat(),
            result.get("command", ""),
            result.get("status", "success"),
            result.get("seed"),
            float(result.get("wall_clock", 0.0)),
            str(result.get("manifest_path", "")),
            json.dumps(result.get("summary", {})),
            result.get("error_message", ""),
        ),
    )
    conn.commit()
    conn.close()


def load_run_history(limit=20, db_path=None):
    """Most recent runs first, summaries decoded."""
    db_path = db_path or output_path(HISTORY_DB)
    init_history_db(db_path)
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    rows = conn.execute("SELECT * FROM runs ORDER BY id DESC LIMIT ?", (int(limit),)).fetchall()
    conn.close()
    entries = []
    for row in rows:
        entry = dict(row)
        try:
            entry["summary"] = json.loads(entry.get("summary") or "{}")
        except ValueError:
            entry["summary"] = {}
        entries.append(entry)
    return entries
