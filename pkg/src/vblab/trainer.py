"""Experiment orchestration: corrupt, train, evaluate, sweep.

A run splits the dataset, corrupts the training labels once, trains the MLP
with per-epoch shuffling and evaluates on the clean test split. Writers at
the bottom emit the metric, summary, reliability and sweep files.
"""

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from vblab.analysis import json_real
from vblab.config import Config, SCHEMA_VERSION, check_keys, get_config, load_experiment_file
from vblab.data import (
    LabeledDataset,
    gen_gaussian_blobs,
    load_idx_images,
    split_train_test,
    standardize,
)
from vblab.errors import ConfigError, ConsistencyError, ContractError, DivergenceError, ParameterError
from vblab.logging import get_logger
from vblab.losses import LossSpec, batch_loss_grads, batch_loss_values
from vblab.nn import MlpModel, OptimizerState, Schedule, backward, build_model, sgd_step
from vblab.noise import CorruptionRecord, NoiseModel, corrupt
from vblab.presets import get_preset
from vblab.rng import make_rng, spawn_seeds

logger = get_logger('trainer')

SWEEP_PARAMETERS = ('loss.a', 'loss.alpha', 'loss.beta', 'noise.eta')
SEED_STRIDE = 1000

_TOP_KEYS = {'version', 'dataset', 'noise', 'loss', 'model', 'optimizer',
             'training', 'outputs'}
_DATASET_KEYS = {'kind', 'K', 'per_class', 'd', 'separation', 'path',
                 'images', 'labels', 'test_fraction', 'standardize'}
_NOISE_KEYS = {'kind', 'eta', 'rate_std'}
_LOSS_KEYS = {'family', 'a', 'scale', 'alpha', 'beta', 'passive',
              'passive_family', 'preset'}
_MODEL_KEYS = {'hidden', 'checkpoint'}
_OPTIMIZER_KEYS = {'lr', 'momentum', 'l1_decay', 'schedule', 'gamma'}
_TRAINING_KEYS = {'epochs', 'batch_size', 'seed', 'eval_every', 'ece_bins',
                  'deterministic'}
_OUTPUT_KEYS = {'metrics', 'summary', 'reliability', 'checkpoint',
                'corruption', 'sidecar'}


def _resolve(path: Optional[str], base_dir: Optional[Path]) -> Optional[Path]:
    if path is None:
        return None
    path = Path(path).expanduser()
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return path


def _as_str(path: Optional[Path]) -> Optional[str]:
    return None if path is None else str(path)


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from: synthetic blobs, a CSV file or IDX files."""
    kind: str = 'blobs'
    K: int = 10
    per_class: int = 100
    d: int = 20
    separation: float = 8.0
    path: Optional[Path] = None
    images: Optional[Path] = None
    labels: Optional[Path] = None
    test_fraction: float = 0.2
    standardize: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ('blobs', 'csv', 'idx'):
            raise ConfigError(f"Unknown dataset kind: {self.kind} (blobs, csv, idx)")
        if self.kind == 'csv' and self.path is None:
            raise ConfigError("A csv dataset needs 'path'")
        if self.kind == 'idx' and (self.images is None or self.labels is None):
            raise ConfigError("An idx dataset needs 'images' and 'labels'")

    @classmethod
    def from_dict(cls, data: Dict[str, Any],
                  base_dir: Optional[Path] = None) -> 'DatasetSpec':
        check_keys('dataset', data, _DATASET_KEYS)
        values = dict(data)
        for key in ('path', 'images', 'labels'):
            values[key] = _resolve(values.get(key), base_dir)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'kind': self.kind, 'K': self.K,
                                'test_fraction': self.test_fraction,
                                'standardize': self.standardize}
        if self.kind == 'blobs':
            data.update(per_class=self.per_class, d=self.d, separation=self.separation)
        elif self.kind == 'csv':
            data['path'] = _as_str(self.path)
        else:
            data.update(images=_as_str(self.images), labels=_as_str(self.labels))
        return data

    def load(self, seed: int) -> LabeledDataset:
        if self.kind == 'blobs':
            return gen_gaussian_blobs(self.K, self.per_class, self.d,
                                      self.separation, seed)
        if self.kind == 'csv':
            return LabeledDataset.from_csv(self.path, K=self.K)
        return load_idx_images(self.images, self.labels, K=self.K)


@dataclass(frozen=True)
class OutputPaths:
    metrics: Optional[Path] = None
    summary: Optional[Path] = None
    reliability: Optional[Path] = None
    checkpoint: Optional[Path] = None
    corruption: Optional[Path] = None
    sidecar: Optional[Path] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any],
                  base_dir: Optional[Path] = None) -> 'OutputPaths':
        check_keys('outputs', data, _OUTPUT_KEYS)
        return cls(**{key: _resolve(value, base_dir) for key, value in data.items()})

    def to_dict(self) -> Dict[str, Optional[str]]:
        return {key: _as_str(getattr(self, key)) for key in sorted(_OUTPUT_KEYS)}


def _loss_from_dict(data: Dict[str, Any]) -> LossSpec:
    check_keys('loss', data, _LOSS_KEYS)
    if 'preset' in data:
        return get_preset(data['preset']).spec
    return LossSpec.from_dict(data)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training run needs, fully resolved."""
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    noise: NoiseModel = field(default_factory=NoiseModel.none)
    loss: LossSpec = field(default_factory=LossSpec.ce)
    hidden: Tuple[int, ...] = (128, 128)
    init_checkpoint: Optional[Path] = None
    lr: float = 0.01
    momentum: float = 0.9
    l1_decay: float = 5e-5
    schedule: str = 'cosine'
    gamma: float = 0.97
    epochs: int = 100
    batch_size: int = 128
    seed: int = 123
    eval_every: int = 1
    ece_bins: int = 10
    deterministic: bool = True
    outputs: OutputPaths = field(default_factory=OutputPaths)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'hidden', tuple(int(h) for h in self.hidden))
        for name in ('epochs', 'batch_size', 'eval_every', 'ece_bins'):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if any(h < 1 for h in self.hidden):
            raise ParameterError(f"Hidden widths must be >= 1, got {self.hidden}")
        if self.seed < 0:
            raise ParameterError(f"seed must be >= 0, got {self.seed}")
        try:
            Schedule(self.schedule)
        except ValueError:
            raise ParameterError(
                f"Unknown schedule: {self.schedule} "
                f"({', '.join(s.value for s in Schedule)})"
            )

    @classmethod
    def from_dict(cls, document: Dict[str, Any], config: Optional[Config] = None,
                  base_dir: Optional[Path] = None) -> 'ExperimentConfig':
        """Build a config from an experiment document.

        Missing optimizer and training values come from the user config
        (``[train]`` and ``[run]`` sections).

        Raises:
            ConfigError: Unknown sections or keys.
        """
        config = config or get_config()
        check_keys('experiment', document, _TOP_KEYS)
        sections = {name: document.get(name) or {} for name in _TOP_KEYS - {'version'}}
        for name, values in sections.items():
            if not isinstance(values, dict):
                raise ConfigError(f"Section '{name}' must be a JSON object")

        model = sections['model']
        optimizer = sections['optimizer']
        training = sections['training']
        check_keys('noise', sections['noise'], _NOISE_KEYS)
        check_keys('model', model, _MODEL_KEYS)
        check_keys('optimizer', optimizer, _OPTIMIZER_KEYS)
        check_keys('training', training, _TRAINING_KEYS)

        def train_default(key: str, source: Dict[str, Any]):
            return source.get(key, config.get('train', key))

        return cls(
            dataset=DatasetSpec.from_dict(sections['dataset'], base_dir),
            noise=NoiseModel.from_dict(sections['noise']),
            loss=_loss_from_dict(sections['loss'] or {'family': 'ce'}),
            hidden=tuple(model.get('hidden', (128, 128))),
            init_checkpoint=_resolve(model.get('checkpoint'), base_dir),
            lr=float(train_default('lr', optimizer)),
            momentum=float(train_default('momentum', optimizer)),
            l1_decay=float(train_default('l1_decay', optimizer)),
            schedule=str(train_default('schedule', optimizer)),
            gamma=float(optimizer.get('gamma', 0.97)),
            epochs=int(train_default('epochs', training)),
            batch_size=int(train_default('batch_size', training)),
            seed=config.resolve_seed(training.get('seed')),
            eval_every=int(train_default('eval_every', training)),
            ece_bins=int(train_default('ece_bins', training)),
            deterministic=bool(training.get('deterministic',
                                            config.get('run', 'deterministic', True))),
            outputs=OutputPaths.from_dict(sections['outputs'], base_dir),
        )

    @classmethod
    def from_file(cls, path: Path, config: Optional[Config] = None) -> 'ExperimentConfig':
        """Load a JSON experiment file; relative paths resolve against its folder."""
        path = Path(path)
        return cls.from_dict(load_experiment_file(path), config, base_dir=path.parent)

    def to_dict(self) -> Dict[str, Any]:
        """The fully-resolved document, as written to the provenance sidecar."""
        return {
            'version': SCHEMA_VERSION,
            'dataset': self.dataset.to_dict(),
            'noise': self.noise.to_dict(),
            'loss': self.loss.to_dict(),
            'model': {'hidden': list(self.hidden),
                      'checkpoint': _as_str(self.init_checkpoint)},
            'optimizer': {'lr': self.lr, 'momentum': self.momentum,
                          'l1_decay': self.l1_decay, 'schedule': self.schedule,
                          'gamma': self.gamma},
            'training': {'epochs': self.epochs, 'batch_size': self.batch_size,
                         'seed': self.seed, 'eval_every': self.eval_every,
                         'ece_bins': self.ece_bins,
                         'deterministic': self.deterministic},
            'outputs': self.outputs.to_dict(),
        }

    def with_parameter(self, parameter: str, value: float) -> 'ExperimentConfig':
        """Copy with one sweepable parameter replaced."""
        if parameter not in SWEEP_PARAMETERS:
            raise ParameterError(
                f"Unknown sweep parameter: {parameter}\n"
                f"Available parameters: {', '.join(SWEEP_PARAMETERS)}"
            )
        section, name = parameter.split('.')
        if section == 'noise':
            return replace(self, noise=self.noise.with_eta(value))
        return replace(self, loss=self.loss.with_parameter(name, value))

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        return replace(self, seed=seed)

    def with_deterministic(self, deterministic: bool) -> 'ExperimentConfig':
        return replace(self, deterministic=bool(deterministic))


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    train_loss: float
    test_accuracy: float
    test_ece: float
    lr: float


@dataclass(frozen=True)
class ReliabilityBin:
    bin_lo: float
    bin_hi: float
    count: int
    avg_conf: float
    avg_acc: float


@dataclass
class ExperimentResult:
    """Metric series plus summary of one run."""
    config: ExperimentConfig
    records: List[MetricsRecord] = field(default_factory=list)
    wall_clock: float = 0.0
    flip_rate: float = 0.0
    reliability: List[ReliabilityBin] = field(default_factory=list)
    model: Optional[MlpModel] = field(default=None, repr=False)
    corruption: Optional[CorruptionRecord] = field(default=None, repr=False)
    corruption_index: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def best_acc(self) -> float:
        return max((r.test_accuracy for r in self.records), default=0.0)

    @property
    def last_acc(self) -> float:
        return self.records[-1].test_accuracy if self.records else 0.0

    @property
    def gap(self) -> float:
        return self.best_acc - self.last_acc

    def summary(self) -> Dict[str, Any]:
        return {
            'config': self.config.to_dict(),
            'best_acc': self.best_acc,
            'last_acc': self.last_acc,
            'gap': self.gap,
            'last_ece': self.records[-1].test_ece if self.records else None,
            'realized_flip_rate': self.flip_rate,
            'epochs_evaluated': len(self.records),
            'wall_clock_seconds': self.wall_clock,
        }


# Metrics ---------------------------------------------------------------------

def _check_predictions(probs: np.ndarray, labels: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ContractError("Predictions must be a non-empty N x K matrix")
    if labels.shape != (probs.shape[0],):
        raise ContractError(
            f"{probs.shape[0]} prediction rows but {labels.size} labels"
        )
    return probs, labels


def compute_accuracy(probs: np.ndarray, labels: Sequence[int]) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    probs, labels = _check_predictions(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def reliability_table(probs: np.ndarray, labels: Sequence[int],
                      n_bins: int = 10) -> List[ReliabilityBin]:
    """Per-bin confidence and accuracy over equal-width, right-closed bins."""
    if n_bins < 1:
        raise ParameterError(f"n_bins must be >= 1, got {n_bins}")
    probs, labels = _check_predictions(probs, labels)
    confidence = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.digitize(confidence, edges[1:-1], right=True)

    table = []
    for b in range(n_bins):
        members = which == b
        count = int(members.sum())
        table.append(ReliabilityBin(
            bin_lo=float(edges[b]),
            bin_hi=float(edges[b + 1]),
            count=count,
            avg_conf=float(confidence[members].mean()) if count else 0.0,
            avg_acc=float(correct[members].mean()) if count else 0.0,
        ))
    return table


def compute_ece(probs: np.ndarray, labels: Sequence[int], n_bins: int = 10) -> float:
    """Expected calibration error; empty bins contribute nothing."""
    table = reliability_table(probs, labels, n_bins)
    n = sum(b.count for b in table)
    return float(sum(b.count / n * abs(b.avg_acc - b.avg_conf) for b in table))


# Training --------------------------------------------------------------------

def _prepare_data(cfg: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    dataset = cfg.dataset.load(cfg.seed)
    train, test = split_train_test(dataset, cfg.dataset.test_fraction, cfg.seed)
    if cfg.dataset.standardize:
        train, test, _ = standardize(train, test)
    return train, test


def _evaluate(model: MlpModel, test: LabeledDataset,
              n_bins: int) -> Tuple[float, float, np.ndarray]:
    _, probs = model.forward(test.features)
    return compute_accuracy(probs, test.labels), compute_ece(probs, test.labels, n_bins), probs


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Corrupt the training split, train, and evaluate on clean test labels.

    Args:
        cfg: The resolved experiment configuration.
        jobs: Worker cap for label corruption.

    Returns:
        The metric series with best/last accuracy and the trained model.

    Raises:
        DivergenceError: A loss or gradient became non-finite; ``partial``
            holds the result collected so far.
    """
    started = time.perf_counter()
    train, test = _prepare_data(cfg)
    clean_test_labels = test.labels.copy()

    record = corrupt(cfg.noise, train.labels, train.K, cfg.seed,
                     features=train.features, jobs=jobs)
    noisy = train.with_labels(record.noisy_labels)
    logger.info("Corrupted %d training labels with %s noise (eta=%g, realized %.4f)",
                train.n, cfg.noise.kind.value, cfg.noise.eta, record.flip_rate)

    model = build_model(train.d, cfg.hidden, train.K, cfg.seed, cfg.init_checkpoint)
    opt = OptimizerState.for_model(
        model, lr0=cfg.lr, momentum=cfg.momentum, l1_decay=cfg.l1_decay,
        schedule=cfg.schedule, total_epochs=cfg.epochs, gamma=cfg.gamma,
    )
    result = ExperimentResult(cfg, flip_rate=record.flip_rate, corruption=record,
                              corruption_index=train.source_index)

    probs = None
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, 'shuffle', epoch).permutation(noisy.n)
        loss_sum = 0.0
        for start in range(0, noisy.n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x, y = noisy.features[batch], noisy.labels[batch]
            _, batch_probs = model.forward(x)
            values = batch_loss_values(cfg.loss, batch_probs, y)
            if not np.all(np.isfinite(values)):
                logger.error("Non-finite loss at epoch %d", epoch)
                raise DivergenceError(f"Non-finite loss at epoch {epoch}", partial=result)
            grads = backward(model, x, batch_loss_grads(cfg.loss, batch_probs, y))
            try:
                sgd_step(model, grads, opt, epoch)
            except DivergenceError as e:
                logger.error("%s", e.diagnostic)
                raise DivergenceError(e.diagnostic, partial=result) from e
            loss_sum += float(values.sum())

        if (epoch + 1) % cfg.eval_every and epoch != cfg.epochs - 1:
            continue
        if not np.array_equal(test.labels, clean_test_labels):
            raise ConsistencyError("Test labels changed during training")
        accuracy, ece, probs = _evaluate(model, test, cfg.ece_bins)
        metrics = MetricsRecord(epoch=epoch + 1, train_loss=loss_sum / noisy.n,
                                test_accuracy=accuracy, test_ece=ece,
                                lr=opt.learning_rate(epoch))
        result.records.append(metrics)
        logger.info("epoch %d: loss=%.4f acc=%.4f ece=%.4f lr=%.5f",
                    metrics.epoch, metrics.train_loss, accuracy, ece, metrics.lr)

    result.model = model
    result.reliability = reliability_table(probs, test.labels, cfg.ece_bins)
    result.wall_clock = time.perf_counter() - started
    return result


# Sweeps ----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    value: float
    seed: int
    best_acc: float
    last_acc: float
    gap: float


def _sweep_run(cfg: ExperimentConfig) -> Tuple[float, float, float]:
    result = run_experiment(cfg)
    return result.best_acc, result.last_acc, result.gap


def sweep(base_cfg: ExperimentConfig, parameter: str, values: Sequence[float],
          jobs: int = 1) -> List[SweepRow]:
    """Run one experiment per value of ``parameter``.

    Run ``i`` uses seed ``base_cfg.seed + i * 1000``. With ``jobs > 1`` runs
    execute in separate processes; rows come back in value order.
    """
    if not values:
        raise ParameterError("A sweep needs at least one value")
    seeds = spawn_seeds(base_cfg.seed, len(values), SEED_STRIDE)
    configs = [base_cfg.with_parameter(parameter, v).with_seed(s)
               for v, s in zip(values, seeds)]
    logger.info("Sweeping %s over %d values", parameter, len(values))

    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_run, configs))
    else:
        outcomes = [_sweep_run(c) for c in configs]

    return [SweepRow(float(v), s, *outcome)
            for v, s, outcome in zip(values, seeds, outcomes)]


# Writers ---------------------------------------------------------------------

def _open_csv(path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return open(path, 'w', newline='', encoding='utf-8')


def write_metrics_csv(records: Sequence[MetricsRecord], path: Path) -> Path:
    with _open_csv(path) as f:
        writer = csv.writer(f)
        writer.writerow(['epoch', 'train_loss', 'test_acc', 'test_ece', 'lr'])
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.test_accuracy),
                             repr(r.test_ece), repr(r.lr)])
    return Path(path)


def write_reliability_csv(table: Sequence[ReliabilityBin], path: Path) -> Path:
    with _open_csv(path) as f:
        writer = csv.writer(f)
        writer.writerow(['bin_lo', 'bin_hi', 'count', 'avg_conf', 'avg_acc'])
        for b in table:
            writer.writerow([repr(b.bin_lo), repr(b.bin_hi), b.count,
                             repr(b.avg_conf), repr(b.avg_acc)])
    return Path(path)


def write_sweep_csv(rows: Sequence[SweepRow], parameter: str, path: Path) -> Path:
    with _open_csv(path) as f:
        writer = csv.writer(f)
        writer.writerow([parameter, 'seed', 'best_acc', 'last_acc', 'gap'])
        for r in rows:
            writer.writerow([repr(r.value), r.seed, repr(r.best_acc),
                             repr(r.last_acc), repr(r.gap)])
    return Path(path)


def jsonable(value: Any) -> Any:
    """Copy of a nested document with infinities spelled ``"inf"``."""
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, float):
        return json_real(value)
    return value


def write_json(document: Dict[str, Any], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(document), indent=2) + '\n', encoding='utf-8')
    return path
