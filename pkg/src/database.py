import os
import sqlite3
from contextlib import contextmanager


def get_database_path(default='runs.db'):
    return os.getenv('QGCN_DATABASE_PATH', default)


@contextmanager
def get_db_connection(path=None):
    conn = sqlite3.connect(path or get_database_path())
    conn.row_factory = sqlite3.Row
    try:
        yield conn
    finally:
        conn.close()


def init_db(path=None):
    with get_db_connection(path) as conn:
        cursor = conn.cursor()

        # One row per experiment run
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                experiment TEXT NOT NULL,
                label TEXT,
                variant TEXT NOT NULL,
                config TEXT NOT NULL,
                manifest_hash TEXT,
                master_seed INTEGER NOT NULL,
                status TEXT NOT NULL DEFAULT 'running'
                    CHECK(status IN ('running', 'completed', 'failed')),
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                finished_at TIMESTAMP
            )
        ''')

        # Training loss per epoch
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS epoch_metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                epoch INTEGER NOT NULL,
                loss REAL NOT NULL,
                seconds REAL,
                FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
            )
        ''')

        # Ranking metrics per evaluation
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS evaluations (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER NOT NULL,
                epoch INTEGER NOT NULL,
                split TEXT NOT NULL,
                k INTEGER NOT NULL,
                recall REAL NOT NULL,
                ndcg REAL NOT NULL,
                n_users INTEGER,
                FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
            )
        ''')

        cursor.execute('''
            CREATE INDEX IF NOT EXISTS idx_epoch_run
            ON epoch_metrics(run_id)
        ''')
        cursor.execute('''
            CREATE INDEX IF NOT EXISTS idx_eval_run
            ON evaluations(run_id, split, k)
        ''')

        conn.commit()
