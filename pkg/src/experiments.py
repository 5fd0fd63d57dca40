"""
Experiment orchestration for QGCN
Training runs with model selection, robustness sweeps, ablations and grids
"""

import copy
import csv
import itertools
import json
import logging
import os
from typing import Dict, List, Optional, Sequence

from checkpoint import load_checkpoint, save_checkpoint
from config import RunConfig, derive_seed, normalize_variant
from data import MANIFEST_FILE, SplitDataset, import_split, load_split, manifest_hash
from evaluation import MetricReport, evaluate_many
from graph import InteractionSet, build_normalized_adjacency, perturb
from metrics_collector import MetricsCollector
from model import init_params, transform_parameter_count
from train import BPRTrainer

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = 'best.npz'
LAST_CHECKPOINT = 'last.npz'
ABLATION_VARIANTS = ('qgcn', 'qgcn_q', 'qgcn_w')
ABLATION_READOUTS = ('max', 'sum', 'concat', 'mean')


def _write_json(path, payload):
    with open(path, 'w', encoding='utf-8', newline='\n') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write('\n')


def _write_table(path, header: Sequence[str], rows: List[Dict]):
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=list(header), lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: repr(v) if isinstance(v, float) else v for key, v in row.items()})


def load_dataset(path) -> SplitDataset:
    """A prepared split when a manifest exists, else a pre-made dense split"""
    if not os.path.isdir(path):
        raise FileNotFoundError(f"Dataset directory not found: {path}")
    if os.path.exists(os.path.join(path, MANIFEST_FILE)):
        return load_split(path)
    return import_split(path)


class ExperimentRunner:
    """Runs experiments described by a RunConfig and writes their artefacts"""

    def __init__(self, run_cfg: RunConfig, db_path: Optional[str] = None):
        self.cfg = run_cfg.validate()
        self.db_path = db_path
        self._split: Optional[SplitDataset] = None

    @property
    def split(self) -> SplitDataset:
        if self._split is None:
            self._split = load_dataset(self.cfg.dataset)
            logger.info("Loaded %s: M=%d N=%d train=%d validation=%d test=%d",
                        self.cfg.dataset, self._split.n_users, self._split.n_items,
                        self._split.train.n_edges, self._split.validation.n_edges,
                        self._split.test.n_edges)
        return self._split

    def _manifest_hash(self) -> Optional[str]:
        if os.path.exists(os.path.join(self.cfg.dataset, MANIFEST_FILE)):
            return manifest_hash(self.cfg.dataset)
        return None

    def _collector(self, out_dir) -> MetricsCollector:
        db_path = self.db_path or os.getenv('QGCN_DATABASE_PATH') or os.path.join(self.cfg.out, 'runs.db')
        return MetricsCollector(out_dir, db_path=db_path, k=self.cfg.primary_k)

    def train(self, cfg: Optional[RunConfig] = None, out_dir: Optional[str] = None,
              train_graph: Optional[InteractionSet] = None, label: Optional[str] = None) -> Dict:
        """
        Train one model and select the best epoch on validation.

        `train_graph` replaces the split's training edges for propagation and
        sampling (robustness runs); ranking exclusions and the evaluation
        graph always come from the original split.

        Returns:
            The run report: best epoch and test metrics per K
        """
        cfg = (cfg or self.cfg).validate()
        out_dir = out_dir or cfg.out
        os.makedirs(out_dir, exist_ok=True)
        split = self.split
        graph = train_graph if train_graph is not None else split.train
        seeds = cfg.seeds()

        eval_adj = build_normalized_adjacency(split.train)
        train_adj = eval_adj if graph is split.train else build_normalized_adjacency(graph)
        params = init_params(cfg.model, split.n_users, split.n_items, seeds['init'])
        trainer = BPRTrainer(cfg.model, cfg.train, graph, train_adj, params,
                             seeds['sampling'], seeds['dropout'])
        selection = 'validation' if split.validation.n_edges > 0 else 'test'
        if selection == 'test':
            logger.warning("No validation interactions; selecting the model on test")

        _write_json(os.path.join(out_dir, 'config.json'), cfg.to_dict())
        _write_json(os.path.join(out_dir, 'run.json'), {
            'seeds': {'master': cfg.train.seed, **seeds},
            'manifest_hash': self._manifest_hash(),
            'M': split.n_users,
            'N': split.n_items,
            'E_train': graph.n_edges,
            'parameters': params.num_parameters(),
            'transform_parameters_per_layer': transform_parameter_count(cfg.model),
            'selection_split': selection,
        })

        collector = self._collector(out_dir)
        collector.start_run(cfg.experiment, cfg.to_dict(), cfg.train.seed,
                            self._manifest_hash(), label)
        best_path = os.path.join(out_dir, BEST_CHECKPOINT)
        save_checkpoint(best_path, cfg.model, trainer.params, split.n_users, split.n_items, 0)
        best_epoch, stale = 0, 0

        try:
            for epoch in range(1, cfg.train.epochs + 1):
                loss, seconds = trainer.run_epoch()
                reports = None
                if epoch % cfg.eval_interval == 0 or epoch == cfg.train.epochs:
                    reports = evaluate_many(cfg.model, trainer.params, eval_adj, split,
                                            cfg.topk, selection)
                    logger.info("epoch %d %s recall@%d=%.5f ndcg@%d=%.5f", epoch, selection,
                                reports[0].k, reports[0].recall, reports[0].k, reports[0].ndcg)
                collector.record_epoch(epoch, loss, seconds, reports)
                if reports:
                    best = collector.best_evaluation(selection, cfg.primary_k)
                    if best['epoch'] == epoch:
                        best_epoch, stale = epoch, 0
                        save_checkpoint(best_path, cfg.model, trainer.params,
                                        split.n_users, split.n_items, epoch)
                    else:
                        stale += 1
                if cfg.train.patience and stale >= cfg.train.patience:
                    logger.info("No improvement for %d evaluations; stopping at epoch %d",
                                stale, epoch)
                    break

            save_checkpoint(os.path.join(out_dir, LAST_CHECKPOINT), cfg.model, trainer.params,
                            split.n_users, split.n_items, trainer.epoch)
            _, best_params, _ = load_checkpoint(best_path)
            test_reports = evaluate_many(cfg.model, best_params, eval_adj, split, cfg.topk, 'test')
            for report in test_reports:
                collector.record_evaluation(best_epoch, report)
        except Exception:
            collector.finish_run('failed')
            raise

        report = {
            'best_epoch': best_epoch,
            'epochs_trained': trainer.epoch,
            'selection_split': selection,
            'test': [r.to_dict() for r in test_reports],
        }
        _write_json(os.path.join(out_dir, 'report.json'), report)
        collector.finish_run('completed')
        logger.info("Run in %s finished: best epoch %d, test recall@%d=%.5f", out_dir,
                    best_epoch, test_reports[0].k, test_reports[0].recall)
        return report

    def evaluate_checkpoint(self, checkpoint_path: str, ks: Optional[Sequence[int]] = None,
                            split_name: str = 'test') -> List[MetricReport]:
        """Metrics of a saved checkpoint on the dataset's held-out split"""
        model_cfg, params, meta = load_checkpoint(checkpoint_path)
        split = self.split
        if (meta['M'], meta['N']) != (split.n_users, split.n_items):
            raise ValueError(
                f"Checkpoint covers {meta['M']} users / {meta['N']} items, "
                f"dataset has {split.n_users} / {split.n_items}"
            )
        adj = build_normalized_adjacency(split.train)
        reports = evaluate_many(model_cfg, params, adj, split, ks or self.cfg.topk, split_name)
        os.makedirs(self.cfg.out, exist_ok=True)
        _write_json(os.path.join(self.cfg.out, 'eval.json'), {
            'checkpoint': checkpoint_path,
            'epoch': meta.get('epoch'),
            'reports': [r.to_dict() for r in reports],
        })
        return reports

    def robustness(self, mode: str, ratios: Sequence[float]) -> List[Dict]:
        """
        Retrain on perturbed training graphs and compare against ratio 0.

        Each ratio gets its own perturbation seed; evaluation uses the
        original graph. Writes robustness.csv with one row per ratio per metric.
        """
        ratios = [float(r) for r in ratios]
        if 0.0 not in ratios:
            ratios = [0.0] + ratios
        split = self.split
        k = self.cfg.primary_k
        results = {}
        for ratio in ratios:
            seed = derive_seed(self.cfg.train.seed, f'perturb:{mode}:{ratio}')
            graph = perturb(split.train, mode, ratio, seed)
            logger.info("%s ratio %.2f: %d -> %d training edges", mode, ratio,
                        split.train.n_edges, graph.n_edges)
            cell_dir = os.path.join(self.cfg.out, f'{mode}_{ratio:g}')
            report = self.train(self._cell(experiment='robustness'), cell_dir, graph,
                                label=f'{mode}:{ratio:g}')
            results[ratio] = (graph.n_edges, report['test'][0])

        rows = []
        baseline = results[0.0][1]
        for ratio in ratios:
            n_edges, metrics = results[ratio]
            for name in ('recall', 'ndcg'):
                base = baseline[name]
                change = (metrics[name] - base) / base if base > 0 else 0.0
                rows.append({
                    'mode': mode,
                    'ratio': ratio,
                    'E_train': n_edges,
                    'metric': f'{name}@{k}',
                    'value': metrics[name],
                    'relative_change': change,
                })
        _write_table(os.path.join(self.cfg.out, 'robustness.csv'),
                     ['mode', 'ratio', 'E_train', 'metric', 'value', 'relative_change'], rows)
        return rows

    def _cell(self, experiment: str, **model_overrides) -> RunConfig:
        cfg = copy.deepcopy(self.cfg)
        cfg.experiment = experiment
        for key, value in model_overrides.items():
            if key == 'variant':
                value = normalize_variant(value)
            if hasattr(cfg.model, key):
                setattr(cfg.model, key, value)
            else:
                setattr(cfg.train, key, value)
        return cfg.validate()

    def ablation(self, variants: Sequence[str] = ABLATION_VARIANTS,
                 readouts: Sequence[str] = ABLATION_READOUTS) -> List[Dict]:
        """
        Variant and readout comparison on shared seeds.

        Variants run with the configured readout; readouts run on the full
        qgcn model. Writes ablation.csv with one row per cell.
        """
        cells = [(variant, self.cfg.model.readout) for variant in variants]
        cells += [('qgcn', readout) for readout in readouts if ('qgcn', readout) not in cells]
        k = self.cfg.primary_k
        rows = []
        for variant, readout in cells:
            cfg = self._cell('ablation', variant=variant, readout=readout)
            out_dir = os.path.join(self.cfg.out, f'{variant}_{readout}')
            report = self.train(cfg, out_dir, label=f'{variant}/{readout}')
            rows.append({
                'variant': variant,
                'readout': readout,
                f'recall@{k}': report['test'][0]['recall'],
                f'ndcg@{k}': report['test'][0]['ndcg'],
                'best_epoch': report['best_epoch'],
            })
        _write_table(os.path.join(self.cfg.out, 'ablation.csv'),
                     ['variant', 'readout', f'recall@{k}', f'ndcg@{k}', 'best_epoch'], rows)
        return rows

    def sweep(self, variants: Optional[Sequence[str]] = None,
              layers: Optional[Sequence[int]] = None,
              dropouts: Optional[Sequence[float]] = None,
              regs: Optional[Sequence[float]] = None) -> List[Dict]:
        """Grid over variant x layers x dropout x reg; writes sweep.csv"""
        variants = list(variants or [self.cfg.model.variant])
        layers = list(layers or [self.cfg.model.layers])
        dropouts = list(dropouts if dropouts is not None else [self.cfg.model.dropout])
        regs = list(regs if regs is not None else [self.cfg.train.reg])
        k = self.cfg.primary_k
        rows = []
        for variant, n_layers, dropout, reg in itertools.product(variants, layers, dropouts, regs):
            cfg = self._cell('sweep', variant=variant, layers=n_layers, dropout=dropout, reg=reg)
            name = f'{variant}_L{n_layers}_p{dropout:g}_reg{reg:g}'
            report = self.train(cfg, os.path.join(self.cfg.out, name), label=name)
            rows.append({
                'variant': variant,
                'layers': n_layers,
                'dropout': float(dropout),
                'reg': float(reg),
                f'recall@{k}': report['test'][0]['recall'],
                f'ndcg@{k}': report['test'][0]['ndcg'],
                'best_epoch': report['best_epoch'],
            })
        _write_table(os.path.join(self.cfg.out, 'sweep.csv'),
                     ['variant', 'layers', 'dropout', 'reg', f'recall@{k}', f'ndcg@{k}',
                      'best_epoch'], rows)
        return rows
