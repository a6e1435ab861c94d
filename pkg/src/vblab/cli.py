"""Command-line interface for vblab."""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from vblab import __version__
from vblab.analysis import (
    argmin_weighted_risk_bruteforce,
    asymmetry_threshold,
    certified_under_noise,
    certify_asymmetric,
    excess_risk_bound_general,
    excess_risk_bound_symmetric,
    symmetric_defect,
    variation_ratio_closed,
    variation_ratio_numeric,
)
from vblab.config import SCHEMA_VERSION, create_default_config_file, get_config
from vblab.data import (
    LabeledDataset,
    gen_gaussian_blobs,
    load_idx_images,
    load_labels,
    split_train_test,
    standardize,
)
from vblab.errors import DivergenceError, UnboundedLossError
from vblab.logging import get_logger, level_from_flags, setup_logging
from vblab.losses import (
    FAMILIES,
    Family,
    LossSpec,
    grad_magnitude_curve,
    parse_family,
    write_curve_csv,
)
from vblab.nn import save_checkpoint
from vblab.noise import NoiseKind, NoiseModel, corrupt, empirical_transition_matrix, parse_kind
from vblab.presets import PRESETS, get_preset
from vblab.trainer import (
    SWEEP_PARAMETERS,
    ExperimentConfig,
    ExperimentResult,
    jsonable,
    run_experiment,
    sweep,
    write_json,
    write_metrics_csv,
    write_reliability_csv,
    write_sweep_csv,
)

logger = get_logger('cli')

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_INTERRUPTED = 130


class UsageError(ValueError):
    """Flag combination that parses but cannot be served."""


def _print_json(document: Dict[str, Any]) -> None:
    print(json.dumps(jsonable(document), indent=2))


def _sidecar_path(out: Path) -> Path:
    return Path(f'{Path(out).with_suffix("")}.resolved.json')


def _write_sidecar(command: str, out: Path, /, **fields: Any) -> Path:
    """Record the resolved inputs of a command next to its output file."""
    document = {'version': SCHEMA_VERSION, 'command': command, **fields}
    path = write_json(document, _sidecar_path(out))
    logger.info("Wrote resolved parameters to %s", path)
    return path


def _optional_path(path: Optional[Path]) -> Optional[str]:
    return str(path) if path is not None else None


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# analyze ---------------------------------------------------------------------

def _loss_from_args(args: argparse.Namespace) -> LossSpec:
    if args.preset:
        return get_preset(args.preset).spec
    if not args.loss:
        raise UsageError("analyze needs --loss or --preset")
    family = parse_family(args.loss)
    if family is Family.COMBINED:
        if not args.passive:
            raise UsageError("A combined loss needs --passive (vce, vel or vsl)")
        passive = LossSpec(args.passive, a=args.a)
        return LossSpec.combined(passive, alpha=args.alpha, beta=args.beta)
    return LossSpec(family, a=args.a, scale=args.scale)


def _noise_from_args(args: argparse.Namespace) -> Optional[NoiseModel]:
    if args.noise is None:
        return None
    kind = parse_kind(args.noise)
    if kind is NoiseKind.INSTANCE:
        raise UsageError(
            "Instance-dependent noise bounds need realized transition rows; "
            "corrupt a dataset first (vblab corrupt --kind instance)"
        )
    if args.k is None:
        raise UsageError("--noise needs --k (number of classes)")
    return NoiseModel(kind, args.eta)


def cmd_analyze(args: argparse.Namespace) -> int:
    """Print the variation report plus bounds and certificates as JSON."""
    spec = _loss_from_args(args)
    noise = _noise_from_args(args)
    analyzed = spec
    if spec.family is Family.COMBINED:
        logger.info("Analyzing the passive part of %s", spec.label)
        analyzed = spec.passive
    elif not spec.is_single:
        raise UsageError(f"{spec.family.name} has no single-argument loss curve")

    if args.grid_steps:
        report = variation_ratio_numeric(analyzed, args.grid_steps)
    else:
        report = variation_ratio_closed(analyzed)
    document: Dict[str, Any] = report.to_dict()
    if analyzed is not spec:
        document['combined'] = spec.to_dict()

    if noise is not None:
        document['noise'] = {**noise.to_dict(), 'K': args.k}
        bounds = []
        try:
            if noise.kind is NoiseKind.SYMMETRIC:
                bounds.append(excess_risk_bound_symmetric(analyzed, args.k, noise.eta))
            bounds.append(excess_risk_bound_general(analyzed, noise, args.k))
        except UnboundedLossError as e:
            logger.warning("No excess-risk bound: %s", e)
        document['bounds'] = [b.to_dict() for b in bounds]
        document['asymmetry_threshold'] = asymmetry_threshold(noise, args.k)
        certified = certified_under_noise(analyzed, noise, args.k)
        document['certificate'] = 'certified' if certified else 'not_certified'

    if args.weights:
        document['weights'] = args.weights
        document['weights_certificate'] = certify_asymmetric(analyzed, args.weights).value
        if args.verify:
            found = argmin_weighted_risk_bruteforce(analyzed, args.weights)
            document['bruteforce_argmin'] = found.point.tolist()

    if args.defect_pairs:
        if args.k is None:
            raise UsageError("--defect-pairs needs --k")
        document['defect'] = symmetric_defect(analyzed, args.k, args.defect_pairs,
                                              args.seed, jobs=args.jobs)
        document['defect_bound'] = report.variation_ratio - 1.0

    if args.curve:
        write_curve_csv(grad_magnitude_curve(analyzed, args.curve_points), args.curve)
        logger.info("Wrote gradient curve to %s", args.curve)

    _print_json(document)
    return EXIT_OK


# corrupt ---------------------------------------------------------------------

def _dataset_from_args(args: argparse.Namespace) -> Optional[LabeledDataset]:
    if args.dataset:
        return LabeledDataset.from_csv(args.dataset, K=args.k)
    if args.idx_images or args.idx_labels:
        if not (args.idx_images and args.idx_labels):
            raise UsageError("--idx-images and --idx-labels go together")
        return load_idx_images(args.idx_images, args.idx_labels, K=args.k)
    return None


def cmd_corrupt(args: argparse.Namespace) -> int:
    """Corrupt a label file or dataset and report the realized noise."""
    dataset = _dataset_from_args(args)
    if dataset is not None:
        labels, features, K = dataset.labels, dataset.features, dataset.K
    elif args.labels:
        labels, features = load_labels(args.labels), None
        if args.k is None:
            raise UsageError("A plain label file needs --k")
        K = args.k
    else:
        raise UsageError("corrupt needs --labels, --dataset or --idx-images/--idx-labels")

    noise = NoiseModel(args.kind, args.eta, args.rate_std)
    record = corrupt(noise, labels, K, args.seed, features=features, jobs=args.jobs)
    if args.out:
        index = dataset.source_index if dataset is not None else None
        record.write_csv(args.out, index=index)
        logger.info("Wrote corrupted labels to %s", args.out)
        _write_sidecar(
            'corrupt', args.out,
            noise=noise.to_dict(), K=K, seed=args.seed, jobs=args.jobs,
            inputs={'labels': _optional_path(args.labels),
                    'dataset': _optional_path(args.dataset),
                    'idx_images': _optional_path(args.idx_images),
                    'idx_labels': _optional_path(args.idx_labels)},
            out=str(args.out),
        )

    document: Dict[str, Any] = {
        'noise': noise.to_dict(),
        'K': K,
        'seed': args.seed,
        'n': int(labels.size),
        'flipped': int(record.flip_mask.sum()),
        'flip_rate': record.flip_rate,
    }
    if args.stats:
        document['transition_matrix'] = empirical_transition_matrix(
            record.clean_labels, record.noisy_labels, K).tolist()
        if record.realized_rates is not None:
            document['mean_realized_rate'] = float(np.mean(record.realized_rates))
    _print_json(document)
    return EXIT_OK


# dataset ---------------------------------------------------------------------

def _dataset_summary(ds: LabeledDataset) -> Dict[str, Any]:
    return {'name': ds.name, 'n': ds.n, 'd': ds.d, 'K': ds.K,
            'class_counts': ds.class_counts().tolist()}


def cmd_dataset(args: argparse.Namespace) -> int:
    """Generate, convert or split datasets."""
    if args.action == 'gen':
        ds = gen_gaussian_blobs(args.k, args.per_class, args.d, args.separation, args.seed)
        ds.to_csv(args.out)
        _write_sidecar('dataset gen', args.out, K=args.k, per_class=args.per_class,
                       d=args.d, separation=args.separation, seed=args.seed,
                       out=str(args.out))
        _print_json(_dataset_summary(ds))
        return EXIT_OK

    if args.action == 'load':
        ds = load_idx_images(args.idx_images, args.idx_labels, K=args.k)
        if args.out:
            ds.to_csv(args.out)
            _write_sidecar('dataset load', args.out, K=ds.K,
                           idx_images=str(args.idx_images), idx_labels=str(args.idx_labels),
                           out=str(args.out))
        _print_json(_dataset_summary(ds))
        return EXIT_OK

    ds = LabeledDataset.from_csv(args.dataset, K=args.k)
    train, test = split_train_test(ds, args.test_fraction, args.seed)
    if args.standardize:
        train, test, _ = standardize(train, test)
    train.to_csv(args.train_out)
    test.to_csv(args.test_out)
    _write_sidecar('dataset split', args.train_out, dataset=str(args.dataset), K=ds.K,
                   test_fraction=args.test_fraction, standardize=args.standardize,
                   seed=args.seed, train_out=str(args.train_out),
                   test_out=str(args.test_out))
    _print_json({'train': _dataset_summary(train), 'test': _dataset_summary(test)})
    return EXIT_OK


# train / sweep ---------------------------------------------------------------

def _load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    if args.seed_given:
        cfg = cfg.with_seed(args.seed)
    if args.deterministic is not None:
        cfg = cfg.with_deterministic(args.deterministic)
    return cfg


def _add_deterministic_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument(
        '--deterministic',
        dest='deterministic',
        action='store_true',
        default=None,
        help='Record deterministic mode in the resolved config (default: from config)'
    )
    group.add_argument(
        '--no-deterministic',
        dest='deterministic',
        action='store_false',
        help='Record non-deterministic mode; runs stay bit-exact under a fixed seed'
    )


def _write_run_outputs(result: ExperimentResult, config_path: Path) -> Dict[str, str]:
    cfg = result.config
    outputs = cfg.outputs
    stem = config_path.with_suffix('')
    metrics = outputs.metrics or Path(f'{stem}.metrics.csv')
    summary = outputs.summary or Path(f'{stem}.summary.json')
    sidecar = outputs.sidecar or Path(f'{stem}.resolved.json')

    written = {'metrics': write_metrics_csv(result.records, metrics),
               'summary': write_json(result.summary(), summary),
               'sidecar': write_json(cfg.to_dict(), sidecar)}
    if outputs.reliability and result.reliability:
        written['reliability'] = write_reliability_csv(result.reliability,
                                                       outputs.reliability)
    if outputs.corruption and result.corruption is not None:
        written['corruption'] = result.corruption.write_csv(
            outputs.corruption, index=result.corruption_index)
    return {key: str(path) for key, path in written.items()}


def cmd_train(args: argparse.Namespace) -> int:
    """Run one experiment from a JSON config."""
    cfg = _load_experiment(args)
    try:
        result = run_experiment(cfg, jobs=args.jobs)
    except DivergenceError as e:
        if isinstance(e.partial, ExperimentResult):
            _write_run_outputs(e.partial, args.config)
        raise

    written = _write_run_outputs(result, args.config)
    checkpoint = args.checkpoint or cfg.outputs.checkpoint
    if checkpoint and result.model is not None:
        written['checkpoint'] = str(save_checkpoint(result.model, checkpoint))
    _print_json({'best_acc': result.best_acc, 'last_acc': result.last_acc,
                 'gap': result.gap, 'outputs': written})
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Run one experiment per value and tabulate best/last accuracy."""
    cfg = _load_experiment(args)
    rows = sweep(cfg, args.param, args.values, jobs=args.jobs)
    if args.out:
        write_sweep_csv(rows, args.param, args.out)
        write_json(cfg.to_dict(), _sidecar_path(args.out))
        print(f"Wrote {len(rows)} rows to {args.out}")
    else:
        print(f"{args.param},seed,best_acc,last_acc,gap")
        for r in rows:
            print(f"{r.value!r},{r.seed},{r.best_acc!r},{r.last_acc!r},{r.gap!r}")
    return EXIT_OK


# Parser ----------------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '--seed',
        type=int,
        default=None,
        help='Random seed (default: $VBLAB_SEED, then ~/.vblab.toml, then 123)'
    )
    common.add_argument(
        '--jobs',
        type=int,
        default=None,
        help='Worker cap for sweeps, corruption and sampling (default: from config or 1)'
    )
    common.add_argument(
        '--verbose',
        action='store_true',
        help='Enable verbose output (show info messages)'
    )
    common.add_argument(
        '--debug',
        action='store_true',
        help='Enable debug output (show all messages)'
    )
    common.add_argument(
        '-q', '--quiet',
        action='store_true',
        help='Suppress all output except errors'
    )
    common.add_argument(
        '--log-file',
        type=Path,
        help='Also write log records to this file'
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='vblab',
        description='Variation-bounded losses: analysis, label noise and training',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Loss families:
{chr(10).join(f"  {name:10s} - {info.description}" for name, info in FAMILIES.items())}

Presets:
{chr(10).join(f"  {name:14s} - {preset.description}" for name, preset in PRESETS.items())}

Examples:
  %(prog)s analyze --loss vce --a 4
  %(prog)s analyze --loss mae --noise symmetric --eta 0.8 --k 10
  %(prog)s analyze --preset nce+vce-c10 --curve grad.csv
  %(prog)s corrupt --kind symmetric --eta 0.3 --k 5 --seed 7 --labels labels.csv
  %(prog)s dataset gen --k 10 --per-class 1000 --d 20 --out blobs.csv
  %(prog)s train --config experiment.json
  %(prog)s sweep --config experiment.json --param loss.a --values 0,0.5,2,8

Exit codes: 0 success, 2 usage or config error, 3 training diverged.
        """
    )
    parser.add_argument(
        '-v', '--version',
        action='version',
        version=f'%(prog)s {__version__}'
    )
    parser.add_argument(
        '--list-losses',
        action='store_true',
        help='List all loss families and exit'
    )
    parser.add_argument(
        '--list-presets',
        action='store_true',
        help='List all loss presets and exit'
    )
    parser.add_argument(
        '--init-config',
        action='store_true',
        help='Create a default ~/.vblab.toml configuration file'
    )

    common = _common_parser()
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')

    analyze = commands.add_parser(
        'analyze', parents=[common],
        help='Variation ratio, excess-risk bounds and asymmetry certificates',
        description='Report the variation ratio of a loss; with noise flags add '
                    'excess-risk bounds, the asymmetry threshold and a certificate.'
    )
    analyze.add_argument('--loss', help=f"Loss family ({', '.join(FAMILIES)})")
    analyze.add_argument('--a', type=float, help='Loss hyperparameter a (VCE, VEL, VSL)')
    analyze.add_argument('--alpha', type=float, default=1.0, help='NCE weight for combined losses')
    analyze.add_argument('--beta', type=float, default=1.0, help='Passive weight for combined losses')
    analyze.add_argument('--passive', help='Passive family for combined losses (vce, vel, vsl)')
    analyze.add_argument('--scale', type=float, default=1.0, help='Loss scale multiplier')
    analyze.add_argument('--preset', choices=PRESETS.keys(), help='Use a named loss preset')
    analyze.add_argument('--noise', help='Noise kind for bounds (symmetric, asymmetric)')
    analyze.add_argument('--eta', type=float, default=0.0, help='Noise rate')
    analyze.add_argument('--k', type=int, help='Number of classes')
    analyze.add_argument('--weights', type=_float_list,
                         help='Comma-separated risk weights to certify')
    analyze.add_argument('--verify', action='store_true',
                         help='Check --weights by simplex grid search (K <= 4)')
    analyze.add_argument('--defect-pairs', type=int,
                         help='Sample this many simplex pairs for the bounded-sum defect')
    analyze.add_argument('--grid-steps', type=int,
                         help='Use the numeric grid estimator with this many points')
    analyze.add_argument('--curve', type=Path, help='Write the |gradient| curve CSV here')
    analyze.add_argument('--curve-points', type=int, default=1000,
                         help='Points on the gradient curve (default: 1000)')
    analyze.set_defaults(handler=cmd_analyze)

    corrupt_cmd = commands.add_parser(
        'corrupt', parents=[common],
        help='Inject label noise into a label file or dataset',
        description='Corrupt labels with symmetric, circular or instance-dependent noise.'
    )
    corrupt_cmd.add_argument('--kind', default='symmetric',
                             help='Noise kind (symmetric, asymmetric, instance)')
    corrupt_cmd.add_argument('--eta', type=float, required=True, help='Noise rate')
    corrupt_cmd.add_argument('--rate-std', type=float, default=0.1,
                             help='Flip-rate spread for instance noise (default: 0.1)')
    corrupt_cmd.add_argument('--k', type=int, help='Number of classes')
    corrupt_cmd.add_argument('--labels', type=Path, help='Label file, one label per line')
    corrupt_cmd.add_argument('--dataset', type=Path, help='Dataset CSV (features + label)')
    corrupt_cmd.add_argument('--idx-images', type=Path, help='IDX image file')
    corrupt_cmd.add_argument('--idx-labels', type=Path, help='IDX label file')
    corrupt_cmd.add_argument('--out', type=Path, help='Write the corruption CSV here')
    corrupt_cmd.add_argument('--stats', action='store_true',
                             help='Include the empirical transition matrix')
    corrupt_cmd.set_defaults(handler=cmd_corrupt)

    dataset = commands.add_parser(
        'dataset', parents=[common],
        help='Generate, convert or split datasets',
        description='gen: Gaussian blobs; load: IDX to CSV; split: stratified train/test.'
    )
    dataset.add_argument('action', choices=['gen', 'load', 'split'])
    dataset.add_argument('--k', type=int, help='Number of classes')
    dataset.add_argument('--per-class', type=int, default=100, help='Samples per class (gen)')
    dataset.add_argument('--d', type=int, default=20, help='Feature dimension (gen)')
    dataset.add_argument('--separation', type=float, default=8.0, help='Mean distance (gen)')
    dataset.add_argument('--idx-images', type=Path, help='IDX image file (load)')
    dataset.add_argument('--idx-labels', type=Path, help='IDX label file (load)')
    dataset.add_argument('--dataset', type=Path, help='Dataset CSV (split)')
    dataset.add_argument('--test-fraction', type=float, default=0.2, help='Test share (split)')
    dataset.add_argument('--standardize', action='store_true',
                         help='Standardize both splits with train statistics (split)')
    dataset.add_argument('--out', type=Path, help='Output CSV (gen, load)')
    dataset.add_argument('--train-out', type=Path, help='Train CSV (split)')
    dataset.add_argument('--test-out', type=Path, help='Test CSV (split)')
    dataset.set_defaults(handler=cmd_dataset)

    train = commands.add_parser(
        'train', parents=[common],
        help='Train one experiment from a JSON config',
        description='Corrupt, train and evaluate as described by an experiment file.'
    )
    train.add_argument('--config', type=Path, required=True, help='Experiment JSON file')
    train.add_argument('--checkpoint', type=Path, help='Save the final model here')
    _add_deterministic_flags(train)
    train.set_defaults(handler=cmd_train)

    sweep_cmd = commands.add_parser(
        'sweep', parents=[common],
        help='Repeat an experiment over parameter values',
        description='Run the experiment once per value; seeds advance by 1000 per value.'
    )
    sweep_cmd.add_argument('--config', type=Path, required=True, help='Experiment JSON file')
    sweep_cmd.add_argument('--param', choices=SWEEP_PARAMETERS, required=True,
                           help='Parameter to vary')
    sweep_cmd.add_argument('--values', type=_float_list, required=True,
                           help='Comma-separated values')
    sweep_cmd.add_argument('--out', type=Path, help='Write the sweep CSV here (default: stdout)')
    _add_deterministic_flags(sweep_cmd)
    sweep_cmd.set_defaults(handler=cmd_sweep)

    return parser


def _validate_dataset_args(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    required = {
        'gen': ('k', 'out'),
        'load': ('idx_images', 'idx_labels'),
        'split': ('dataset', 'train_out', 'test_out'),
    }[args.action]
    missing = [f"--{name.replace('_', '-')}" for name in required
               if getattr(args, name) is None]
    if missing:
        parser.error(f"dataset {args.action} requires {', '.join(missing)}")


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Configure logging based on verbosity flags
    setup_logging(
        level=level_from_flags(getattr(args, 'debug', False),
                               getattr(args, 'verbose', False),
                               getattr(args, 'quiet', False)),
        log_file=getattr(args, 'log_file', None),
    )

    if args.list_losses:
        print("Loss families:")
        for name, info in FAMILIES.items():
            constraint = f" ({info.constraint})" if info.constraint else ''
            print(f"  {name:10s} - {info.description}{constraint}")
        return EXIT_OK

    if args.list_presets:
        print("Presets:")
        for name, preset in PRESETS.items():
            print(f"  {name:14s} - {preset.description}")
        return EXIT_OK

    if args.init_config:
        create_default_config_file()
        return EXIT_OK

    if args.command is None:
        parser.error("a command is required (analyze, corrupt, dataset, train, sweep)")
    if args.command == 'dataset':
        _validate_dataset_args(parser, args)

    try:
        config = get_config()
        args.seed_given = args.seed is not None
        args.seed = config.resolve_seed(args.seed)
        if args.jobs is None:
            args.jobs = int(config.get('run', 'jobs', 1))
        if args.jobs < 1:
            raise UsageError(f"--jobs must be >= 1, got {args.jobs}")
        return args.handler(args)

    except DivergenceError as e:
        print(f"Error: Training diverged - {e.diagnostic}", file=sys.stderr)
        return EXIT_DIVERGED
    except FileNotFoundError as e:
        print(f"Error: File not found - {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"Error: Invalid value - {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\nInterrupted.", file=sys.stderr)
        return EXIT_INTERRUPTED  # Standard exit code for SIGINT
    except OSError as e:
        print(f"Error: System error - {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
