import csv
import json
import os

from database import get_db_connection, init_db


METRICS_FILE = 'metrics.csv'
EVALUATIONS_FILE = 'evaluations.csv'


def _fmt(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsCollector:
    """Collector for training and evaluation metrics of experiment runs"""

    def __init__(self, out_dir, db_path=None, k=20):
        self.out_dir = out_dir
        self.db_path = db_path or os.getenv('QGCN_DATABASE_PATH') or os.path.join(out_dir, 'runs.db')
        self.k = k
        self.run_id = None
        os.makedirs(out_dir, exist_ok=True)
        init_db(self.db_path)

    def start_run(self, experiment, config, master_seed, manifest_hash=None, label=None):
        """Register a run and reset its CSV files"""
        with get_db_connection(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO runs
                (experiment, label, variant, config, manifest_hash, master_seed)
                VALUES (?, ?, ?, ?, ?, ?)
            ''', (
                experiment,
                label,
                config['model']['variant'],
                json.dumps(config, sort_keys=True),
                manifest_hash,
                master_seed
            ))
            conn.commit()
            self.run_id = cursor.lastrowid

        self._write_csv(METRICS_FILE, ['epoch', 'loss', 'split',
                                       f'recall@{self.k}', f'ndcg@{self.k}'], mode='w')
        self._write_csv(EVALUATIONS_FILE, ['epoch', 'split', 'k', 'recall', 'ndcg'], mode='w')
        return self.run_id

    def _write_csv(self, name, row, mode='a'):
        with open(os.path.join(self.out_dir, name), mode, encoding='utf-8', newline='') as handle:
            csv.writer(handle, lineterminator='\n').writerow([_fmt(v) for v in row])

    def _require_run(self):
        if self.run_id is None:
            raise RuntimeError("start_run must be called before recording metrics")

    def record_epoch(self, epoch, loss, seconds=None, reports=None):
        """
        Record one training epoch.

        `reports` are the evaluations made after this epoch, if any; the
        primary-K report goes into metrics.csv next to the loss.
        """
        self._require_run()
        with get_db_connection(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO epoch_metrics (run_id, epoch, loss, seconds)
                VALUES (?, ?, ?, ?)
            ''', (self.run_id, epoch, loss, seconds))
            conn.commit()

        primary = None
        for report in reports or []:
            self.record_evaluation(epoch, report)
            if report.k == self.k and primary is None:
                primary = report
        if primary is None:
            self._write_csv(METRICS_FILE, [epoch, float(loss), None, None, None])
        else:
            self._write_csv(METRICS_FILE, [epoch, float(loss), primary.split,
                                           primary.recall, primary.ndcg])

    def record_evaluation(self, epoch, report):
        """Store one MetricReport and append it to evaluations.csv"""
        self._require_run()
        with get_db_connection(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute('''
                INSERT INTO evaluations (run_id, epoch, split, k, recall, ndcg, n_users)
                VALUES (?, ?, ?, ?, ?, ?, ?)
            ''', (self.run_id, epoch, report.split, report.k,
                  report.recall, report.ndcg, report.n_users))
            conn.commit()
        self._write_csv(EVALUATIONS_FILE, [epoch, report.split, report.k,
                                           float(report.recall), float(report.ndcg)])

    def finish_run(self, status='completed'):
        if status not in ('completed', 'failed'):
            raise ValueError("Status must be 'completed' or 'failed'")
        self._require_run()
        with get_db_connection(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute('''
                UPDATE runs
                SET status = ?, finished_at = CURRENT_TIMESTAMP
                WHERE id = ?
            ''', (status, self.run_id))
            conn.commit()

    def best_evaluation(self, split='validation', k=None, run_id=None):
        """Evaluation with the highest recall; the earliest epoch wins ties"""
        with get_db_connection(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.execute('''
                SELECT epoch, split, k, recall, ndcg, n_users
                FROM evaluations
                WHERE run_id = ? AND split = ? AND k = ?
                ORDER BY recall DESC, epoch ASC
                LIMIT 1
            ''', (run_id or self.run_id, split, k or self.k))
            row = cursor.fetchone()
            return dict(row) if row else None

