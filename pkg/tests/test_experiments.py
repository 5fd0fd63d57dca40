import csv
import json

import numpy as np
import pytest

from checkpoint import load_checkpoint
from config import ModelConfig, RunConfig, TrainConfig
from data import kcore_filter, parse_interactions, split_per_user, write_interactions, write_split
from database import get_db_connection
from evaluation import exclusion_sets
import experiments
from experiments import ExperimentRunner, load_dataset
from graph import build_normalized_adjacency, ratio_count


@pytest.fixture
def prepared(toy_interactions, tmp_path):
    out = tmp_path / 'data'
    write_split(split_per_user(kcore_filter(parse_interactions(toy_interactions), 1), seed=1), out)
    return out


def run_config(dataset, out, **model):
    return RunConfig(
        dataset=str(dataset),
        out=str(out),
        model=ModelConfig(**{'embed_dim': 8, **model}),
        train=TrainConfig(lr=1e-2, batch_size=16, epochs=2, seed=7),
        topk=[5],
        eval_interval=1,
    )


def read_rows(path):
    with open(path, newline='', encoding='utf-8') as handle:
        return list(csv.DictReader(handle))


def test_train_writes_run_directory(prepared, tmp_path, db_path):
    """Config, seeds, manifest hash, metrics and checkpoints are written"""
    out = tmp_path / 'run'
    report = ExperimentRunner(run_config(prepared, out)).train()
    for name in ('config.json', 'run.json', 'metrics.csv', 'evaluations.csv', 'best.npz',
                 'last.npz', 'report.json'):
        assert (out / name).exists()
    run = json.loads((out / 'run.json').read_text(encoding='utf-8'))
    assert len(run['manifest_hash']) == 64
    assert set(run['seeds']) == {'master', 'init', 'sampling', 'dropout'}
    assert run['selection_split'] == 'validation'
    assert report['epochs_trained'] == 2
    assert 1 <= report['best_epoch'] <= 2
    assert len(read_rows(out / 'metrics.csv')) == 2


def test_best_epoch_comes_from_run_log(prepared, tmp_path, db_path):
    """The selected epoch is the logged validation row with the highest recall"""
    cfg = run_config(prepared, tmp_path / 'run')
    cfg.train.epochs = 4
    report = ExperimentRunner(cfg).train()
    with get_db_connection(db_path) as conn:
        rows = conn.execute(
            "SELECT epoch, recall FROM evaluations WHERE split = 'validation' AND k = 5"
        ).fetchall()
    assert len(rows) == 4
    best = max(rows, key=lambda row: (row['recall'], -row['epoch']))
    assert report['best_epoch'] == best['epoch']
    assert load_checkpoint(tmp_path / 'run' / 'best.npz')[2]['epoch'] == best['epoch']


def test_patience_stops_training(prepared, tmp_path, db_path):
    """With lr = 0 nothing improves and patience 1 stops after two evaluations"""
    cfg = run_config(prepared, tmp_path / 'run')
    cfg.train.lr = 0.0
    cfg.train.epochs = 10
    cfg.train.patience = 1
    report = ExperimentRunner(cfg).train()
    assert report['epochs_trained'] == 2
    assert report['best_epoch'] == 1


def test_import_without_validation_selects_on_test(tmp_path, db_path):
    """A split without valid.txt falls back to test for model selection"""
    data = tmp_path / 'premade'
    data.mkdir()
    write_interactions(data / 'train.txt', {0: [0, 1], 1: [1, 2], 2: [0, 3]})
    write_interactions(data / 'test.txt', {0: [2], 1: [3], 2: [1]})
    assert load_dataset(data).validation.n_edges == 0
    report = ExperimentRunner(run_config(data, tmp_path / 'run')).train()
    assert report['selection_split'] == 'test'


def test_missing_dataset_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        ExperimentRunner(run_config(tmp_path / 'missing', tmp_path / 'run')).split


def test_robustness_rows_and_edge_counts(prepared, tmp_path, db_path):
    """Ratio 0 is the baseline; injection grows the training graph by ⌊rE⌋"""
    out = tmp_path / 'robust'
    runner = ExperimentRunner(run_config(prepared, out))
    rows = runner.robustness('inject', [0.25])
    assert len(rows) == 4
    assert [row['ratio'] for row in rows] == [0.0, 0.0, 0.25, 0.25]
    assert {row['metric'] for row in rows} == {'recall@5', 'ndcg@5'}
    assert all(row['relative_change'] == 0.0 for row in rows[:2])
    e_train = runner.split.train.n_edges
    assert rows[2]['E_train'] == e_train + ratio_count(0.25, e_train)
    assert len(read_rows(out / 'robustness.csv')) == 4


def test_robustness_zero_only(prepared, tmp_path, db_path):
    """A ratio list of [0] gives one row per metric with no change"""
    rows = ExperimentRunner(run_config(prepared, tmp_path / 'r0')).robustness('discard', [0])
    assert len(rows) == 2
    assert all(row['relative_change'] == 0.0 for row in rows)


def test_ablation_cells_share_seeds(prepared, tmp_path, db_path):
    """Three variants with the configured readout plus the other readouts on qgcn"""
    out = tmp_path / 'ablation'
    rows = ExperimentRunner(run_config(prepared, out)).ablation()
    assert [(row['variant'], row['readout']) for row in rows] == [
        ('qgcn', 'mean'), ('qgcn_q', 'mean'), ('qgcn_w', 'mean'),
        ('qgcn', 'max'), ('qgcn', 'sum'), ('qgcn', 'concat'),
    ]
    seeds = {json.dumps(json.loads((out / f"{r['variant']}_{r['readout']}" / 'run.json')
                                   .read_text(encoding='utf-8'))['seeds'], sort_keys=True)
             for r in rows}
    assert len(seeds) == 1
    assert len(read_rows(out / 'ablation.csv')) == 6


def test_ablation_variants_only(prepared, tmp_path, db_path):
    """Readouts equal to the configured one add no extra cells"""
    rows = ExperimentRunner(run_config(prepared, tmp_path / 'a')).ablation(readouts=['mean'])
    assert len(rows) == 3


def test_sweep_grid(prepared, tmp_path, db_path):
    """Variants x layers gives one row per cell"""
    out = tmp_path / 'sweep'
    rows = ExperimentRunner(run_config(prepared, out)).sweep(['qgcn', 'lightgcn'], [1, 2])
    assert [(row['variant'], row['layers']) for row in rows] == [
        ('qgcn', 1), ('qgcn', 2), ('lightgcn', 1), ('lightgcn', 2)]
    assert len(read_rows(out / 'sweep.csv')) == 4


def test_evaluate_checkpoint(prepared, tmp_path, db_path):
    """A saved best checkpoint re-evaluates to the reported test metrics"""
    out = tmp_path / 'run'
    runner = ExperimentRunner(run_config(prepared, out))
    report = runner.train()
    reports = runner.evaluate_checkpoint(str(out / 'best.npz'), [5])
    assert reports[0].recall == report['test'][0]['recall']
    assert reports[0].ndcg == report['test'][0]['ndcg']
    assert (out / 'eval.json').exists()


def test_robustness_keeps_evaluation_graph(prepared, tmp_path, db_path, monkeypatch):
    """Only training sees the perturbed graph; evaluation adjacency and exclusions stay original"""
    runner = ExperimentRunner(run_config(prepared, tmp_path / 'robust'))
    original = runner.split
    expected_adj = build_normalized_adjacency(original.train).toarray()
    expected_excluded = {name: [items.tolist() for items in exclusion_sets(original, name)]
                         for name in ('validation', 'test')}
    seen = []
    real_evaluate_many = experiments.evaluate_many

    def recording(cfg, params, adj, split, ks, split_name='test'):
        seen.append((adj.toarray(), split_name,
                     [items.tolist() for items in exclusion_sets(split, split_name)]))
        return real_evaluate_many(cfg, params, adj, split, ks, split_name)

    monkeypatch.setattr(experiments, 'evaluate_many', recording)
    rows = runner.robustness('discard', [0.2])
    assert rows[2]['E_train'] == original.train.n_edges - ratio_count(0.2, original.train.n_edges)
    assert len(seen) >= 4
    for adj, split_name, excluded in seen:
        np.testing.assert_array_equal(adj, expected_adj)
        assert excluded == expected_excluded[split_name]
