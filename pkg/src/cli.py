"""
Command-line entry point for QGCN experiments

    python src/cli.py prepare --input raw.txt --out data/toy
    python src/cli.py train --dataset data/toy --variant qgcn --out runs/qgcn
    python src/cli.py eval --dataset data/toy --checkpoint runs/qgcn/best.npz --topk 10 20
    python src/cli.py robustness --dataset data/toy --mode inject --ratios 0.05 0.25
    python src/cli.py ablation --dataset data/toy --out runs/ablation
    python src/cli.py sweep --dataset data/toy --variant qgcn lightgcn --layers 1 2 3

Every flag --foo-bar takes its default from QGCN_FOO_BAR when that is set.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from config import (READOUTS, REG_SCOPES, VARIANTS, ConfigError, ModelConfig, RunConfig,
                    TrainConfig, derive_seed, env_default, normalize_variant)
from data import (EmptyDatasetError, ParseError, generate_synthetic, import_split,
                  kcore_filter, parse_interactions, split_per_user, write_interactions,
                  write_split)
from experiments import BEST_CHECKPOINT, ExperimentRunner
from graph import InputError
from quaternion import DimensionError

logger = logging.getLogger(__name__)

CLI_VARIANTS = [v.replace('_', '-') for v in VARIANTS]
DEFAULT_RATIOS = [0.05, 0.10, 0.15, 0.20, 0.25]


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(',', ' ').split()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.replace(',', ' ').split()]


def _strings(text: str) -> List[str]:
    return text.replace(',', ' ').split()


def _variant(text: str) -> str:
    value = normalize_variant(text)
    if value not in VARIANTS:
        raise argparse.ArgumentTypeError(f"invalid variant {text!r}; choose from {CLI_VARIANTS}")
    return value


def _add_run_flags(parser: argparse.ArgumentParser, grid: bool = False):
    """Flags shared by every command that trains or evaluates a model"""
    model, train = ModelConfig(), TrainConfig()
    many = '+' if grid else None

    def listed(name, default, cast):
        if grid:
            return env_default(name, [default], {float: _floats, int: _ints, str: _strings}[cast])
        return env_default(name, default, cast)

    parser.add_argument('--dataset', default=env_default('dataset', 'data'),
                        help='Prepared dataset directory')
    parser.add_argument('--out', default=env_default('out', 'runs/latest'),
                        help='Output directory of the run')
    parser.add_argument('--variant', type=_variant, nargs=many,
                        default=listed('variant', model.variant, str),
                        help=f'Model variant ({", ".join(CLI_VARIANTS)})')
    parser.add_argument('--layers', type=int, nargs=many,
                        default=listed('layers', model.layers, int),
                        help='Propagation layers L')
    parser.add_argument('--embed-dim', type=int, default=env_default('embed_dim', model.embed_dim, int),
                        help='Total real embedding size D (a multiple of 4)')
    parser.add_argument('--dropout', type=float, nargs=many,
                        default=listed('dropout', model.dropout, float),
                        help='Dropout on propagated embeddings')
    parser.add_argument('--readout', choices=READOUTS,
                        default=env_default('readout', model.readout),
                        help='Layer readout for the qgcn family')
    parser.add_argument('--include-layer0', action='store_true',
                        default=env_default('include_layer0', model.include_layer0, bool),
                        help='Feed the ego embeddings into the readout')
    parser.add_argument('--reg', type=float, nargs=many,
                        default=listed('reg', train.reg, float),
                        help='L2 regularization coefficient')
    parser.add_argument('--reg-scope', choices=REG_SCOPES,
                        default=env_default('reg_scope', train.reg_scope),
                        help='Regularize batch ego embeddings or all parameters')
    parser.add_argument('--lr', type=float, default=env_default('lr', train.lr, float),
                        help='Adam learning rate')
    parser.add_argument('--batch-size', type=int,
                        default=env_default('batch_size', train.batch_size, int))
    parser.add_argument('--epochs', type=int, default=env_default('epochs', train.epochs, int))
    parser.add_argument('--seed', type=int, default=env_default('seed', train.seed, int),
                        help='Master seed')
    parser.add_argument('--patience', type=int, default=env_default('patience', train.patience, int),
                        help='Stop after this many evaluations without improvement (0 = off)')
    parser.add_argument('--topk', type=int, nargs='+', default=env_default('topk', [20], _ints),
                        help='Cut-offs K; the first one drives model selection')
    parser.add_argument('--eval-interval', type=int,
                        default=env_default('eval_interval', 10, int),
                        help='Evaluate on validation every N epochs')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='qgcn', description='Quaternion graph convolution recommender')
    parser.add_argument('--verbose', '-v', action='store_true',
                        default=env_default('verbose', False, bool), help='Debug logging')
    sub = parser.add_subparsers(dest='command', required=True)

    prepare = sub.add_parser('prepare', help='Filter and split an interaction file')
    source = prepare.add_mutually_exclusive_group(required=True)
    source.add_argument('--input', help='Interaction file: one `user item item ...` line per user')
    source.add_argument('--synthetic', action='store_true', help='Generate clustered synthetic data')
    source.add_argument('--import-dir', help='Directory with a pre-made train/test(/valid) split')
    prepare.add_argument('--out', default=env_default('out', 'data'), help='Dataset directory to write')
    prepare.add_argument('--k-core', type=int, default=env_default('k_core', 10, int))
    prepare.add_argument('--ratios', type=float, nargs=3, default=env_default('ratios', [0.8, 0.1, 0.1], _floats),
                         metavar=('TRAIN', 'VALID', 'TEST'))
    prepare.add_argument('--seed', type=int, default=env_default('seed', 2023, int))
    prepare.add_argument('--users', type=int, default=env_default('users', 1000, int),
                         help='Synthetic users')
    prepare.add_argument('--items', type=int, default=env_default('items', 800, int),
                         help='Synthetic items')
    prepare.add_argument('--per-user', type=int, default=env_default('per_user', 25, int),
                         help='Mean synthetic interactions per user')
    prepare.set_defaults(handler=cmd_prepare)

    train = sub.add_parser('train', help='Train one model')
    _add_run_flags(train)
    train.set_defaults(handler=cmd_train)

    evaluate = sub.add_parser('eval', help='Evaluate a checkpoint on the test split')
    _add_run_flags(evaluate)
    evaluate.add_argument('--checkpoint', default=env_default('checkpoint', None),
                          help=f'Checkpoint file (default: <out>/{BEST_CHECKPOINT})')
    evaluate.set_defaults(handler=cmd_eval)

    robustness = sub.add_parser('robustness', help='Retrain on noisy or thinned training graphs')
    _add_run_flags(robustness)
    robustness.add_argument('--mode', choices=('inject', 'discard'),
                            default=env_default('mode', 'inject'))
    robustness.add_argument('--ratios', type=float, nargs='+',
                            default=env_default('ratios', DEFAULT_RATIOS, _floats))
    robustness.set_defaults(handler=cmd_robustness)

    ablation = sub.add_parser('ablation', help='Compare variants and readouts on shared seeds')
    _add_run_flags(ablation)
    ablation.add_argument('--variants', type=_variant, nargs='+',
                          default=env_default('variants', ['qgcn', 'qgcn_q', 'qgcn_w'], _strings))
    ablation.add_argument('--readouts', choices=READOUTS, nargs='+',
                          default=env_default('readouts', list(READOUTS), _strings))
    ablation.set_defaults(handler=cmd_ablation)

    sweep = sub.add_parser('sweep', help='Grid over variants, layers, dropout and reg')
    _add_run_flags(sweep, grid=True)
    sweep.set_defaults(handler=cmd_sweep)
    return parser


def run_config(args, experiment: str) -> RunConfig:
    """RunConfig from parsed flags; grid flags keep their first value"""
    def first(value):
        return value[0] if isinstance(value, list) else value

    model = ModelConfig(
        variant=first(args.variant),
        layers=first(args.layers),
        embed_dim=args.embed_dim,
        dropout=first(args.dropout),
        readout=args.readout,
        include_layer0=args.include_layer0,
    )
    train = TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        reg=first(args.reg),
        reg_scope=args.reg_scope,
        epochs=args.epochs,
        seed=args.seed,
        patience=args.patience,
    )
    return RunConfig(dataset=args.dataset, out=args.out, experiment=experiment, model=model,
                     train=train, topk=list(args.topk), eval_interval=args.eval_interval).validate()


def cmd_prepare(args) -> int:
    if args.import_dir:
        split = import_split(args.import_dir)
    else:
        if args.synthetic:
            os.makedirs(args.out, exist_ok=True)
            raw_path = os.path.join(args.out, 'raw.txt')
            write_interactions(raw_path, generate_synthetic(
                n_users=args.users, n_items=args.items, interactions_per_user=args.per_user,
                seed=derive_seed(args.seed, 'synthetic')))
        else:
            raw_path = args.input
        raw = kcore_filter(parse_interactions(raw_path), args.k_core)
        split = split_per_user(raw, tuple(args.ratios), derive_seed(args.seed, 'split'))
        split.k_core = args.k_core
    manifest = write_split(split, args.out)
    print(f"Prepared {args.out}: M={manifest['M']} N={manifest['N']} "
          f"train={manifest['E_train']} valid={manifest['E_val']} test={manifest['E_test']}")
    return 0


def cmd_train(args) -> int:
    runner = ExperimentRunner(run_config(args, 'train'))
    report = runner.train()
    for metrics in report['test']:
        print(f"test recall@{metrics['k']}={metrics['recall']:.5f} "
              f"ndcg@{metrics['k']}={metrics['ndcg']:.5f} (best epoch {report['best_epoch']})")
    return 0


def cmd_eval(args) -> int:
    cfg = run_config(args, 'eval')
    checkpoint = args.checkpoint or os.path.join(cfg.out, BEST_CHECKPOINT)
    for report in ExperimentRunner(cfg).evaluate_checkpoint(checkpoint):
        print(f"{report.split} recall@{report.k}={report.recall:.5f} "
              f"ndcg@{report.k}={report.ndcg:.5f} over {report.n_users} users")
    return 0


def cmd_robustness(args) -> int:
    rows = ExperimentRunner(run_config(args, 'robustness')).robustness(args.mode, args.ratios)
    for row in rows:
        print(f"{row['mode']} {row['ratio']:.2f} {row['metric']}={row['value']:.5f} "
              f"({100 * row['relative_change']:+.2f}%)")
    return 0


def cmd_ablation(args) -> int:
    rows = ExperimentRunner(run_config(args, 'ablation')).ablation(args.variants, args.readouts)
    for row in rows:
        print(', '.join(f"{key}={value}" for key, value in row.items()))
    return 0


def cmd_sweep(args) -> int:
    rows = ExperimentRunner(run_config(args, 'sweep')).sweep(
        args.variant, args.layers, args.dropout, args.reg)
    for row in rows:
        print(', '.join(f"{key}={value}" for key, value in row.items()))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )
    try:
        return args.handler(args)
    except (ConfigError, DimensionError, EmptyDatasetError, InputError, ParseError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
