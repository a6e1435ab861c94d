"""Label-noise generators and empirical noise statistics.

Three corruption models are provided:

- symmetric: with probability ``eta`` a label moves to a uniformly random
  *different* class, so every off-diagonal transition is ``eta / (K - 1)``;
- asymmetric (circular): with probability ``eta`` label ``y`` becomes
  ``(y + 1) mod K``;
- instance-dependent (part-dependent style): each instance draws its own
  flip rate from a truncated normal and distributes it over the wrong
  classes through a random linear projection of its features.

Per-instance variates are drawn in fixed chunks from counter-based streams
(see ``vblab.rng``), so the result does not depend on how many workers
process the chunks.
"""

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
from scipy import stats

from vblab.errors import ContractError, DegenerateClassError, ParameterError
from vblab.logging import get_logger
from vblab.rng import make_rng, map_chunks

logger = get_logger('noise')

MAX_INSTANCE_ETA = 0.6
DEFAULT_RATE_STD = 0.1


class NoiseKind(str, Enum):
    """Supported label-noise models."""
    SYMMETRIC = 'symmetric'
    ASYMMETRIC = 'asymmetric'
    INSTANCE = 'instance'


_KIND_ALIASES = {
    'sym': NoiseKind.SYMMETRIC,
    'symmetric': NoiseKind.SYMMETRIC,
    'asym': NoiseKind.ASYMMETRIC,
    'asymmetric': NoiseKind.ASYMMETRIC,
    'circular': NoiseKind.ASYMMETRIC,
    'instance': NoiseKind.INSTANCE,
    'instance-dependent': NoiseKind.INSTANCE,
    'idn': NoiseKind.INSTANCE,
    'pdn': NoiseKind.INSTANCE,
}


def parse_kind(name: Union[str, NoiseKind]) -> NoiseKind:
    """Turn a noise-kind name or alias into a ``NoiseKind``."""
    if isinstance(name, NoiseKind):
        return name
    try:
        return _KIND_ALIASES[str(name).strip().lower()]
    except KeyError:
        raise ParameterError(
            f"Unknown noise kind: {name}\n"
            f"Available kinds: {', '.join(k.value for k in NoiseKind)}"
        )


@dataclass(frozen=True)
class NoiseModel:
    """A label-noise model with its target overall rate ``eta``."""
    kind: NoiseKind
    eta: float = 0.0
    rate_std: float = DEFAULT_RATE_STD

    def __post_init__(self) -> None:
        object.__setattr__(self, 'kind', parse_kind(self.kind))
        object.__setattr__(self, 'eta', float(self.eta))
        if not 0.0 <= self.eta < 1.0:
            raise ParameterError(f"Noise rate must lie in [0, 1), got {self.eta}")
        if self.kind is NoiseKind.INSTANCE:
            if self.eta > MAX_INSTANCE_ETA:
                raise ParameterError(
                    f"Instance-dependent noise requires eta <= {MAX_INSTANCE_ETA}, "
                    f"got {self.eta}"
                )
            if self.rate_std < 0:
                raise ParameterError(f"rate_std must be >= 0, got {self.rate_std}")
        if self.kind is NoiseKind.ASYMMETRIC and self.eta >= 0.5:
            logger.warning(
                "Circular noise with eta=%.3g >= 0.5 is not clean-label dominant",
                self.eta
            )

    @classmethod
    def symmetric(cls, eta: float) -> 'NoiseModel':
        return cls(NoiseKind.SYMMETRIC, eta)

    @classmethod
    def asymmetric(cls, eta: float) -> 'NoiseModel':
        return cls(NoiseKind.ASYMMETRIC, eta)

    @classmethod
    def instance(cls, eta: float, rate_std: float = DEFAULT_RATE_STD) -> 'NoiseModel':
        return cls(NoiseKind.INSTANCE, eta, rate_std)

    @classmethod
    def none(cls) -> 'NoiseModel':
        return cls(NoiseKind.SYMMETRIC, 0.0)

    def with_eta(self, eta: float) -> 'NoiseModel':
        return NoiseModel(self.kind, eta, self.rate_std)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'kind': self.kind.value, 'eta': self.eta}
        if self.kind is NoiseKind.INSTANCE:
            data['rate_std'] = self.rate_std
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NoiseModel':
        return cls(data.get('kind', 'symmetric'), float(data.get('eta', 0.0)),
                   float(data.get('rate_std', DEFAULT_RATE_STD)))

    def transition_matrix(self, K: int) -> np.ndarray:
        """Analytic ``K x K`` transition matrix (symmetric and circular only)."""
        _check_classes(K)
        if self.kind is NoiseKind.SYMMETRIC:
            matrix = np.full((K, K), self.eta / (K - 1))
            np.fill_diagonal(matrix, 1.0 - self.eta)
            return matrix
        if self.kind is NoiseKind.ASYMMETRIC:
            return ((1.0 - self.eta) * np.eye(K)
                    + self.eta * np.roll(np.eye(K), 1, axis=1))
        raise ContractError(
            "Instance-dependent noise has no class-level transition matrix; "
            "use the transition_rows of a CorruptionRecord"
        )


@dataclass
class CorruptionRecord:
    """Outcome of corrupting a label vector.

    ``realized_rates`` and ``transition_rows`` are filled for
    instance-dependent noise only: the per-instance flip rate ``q_i`` and the
    full label distribution each noisy label was sampled from.
    """
    clean_labels: np.ndarray
    noisy_labels: np.ndarray
    flip_mask: np.ndarray
    realized_rates: Optional[np.ndarray] = None
    transition_rows: Optional[np.ndarray] = None

    @property
    def flip_rate(self) -> float:
        return float(self.flip_mask.mean()) if self.flip_mask.size else 0.0

    def write_csv(self, path: Path, index: Optional[Sequence[int]] = None) -> Path:
        """Write ``index,clean_label,noisy_label,flipped[,realized_rate]``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        ids = np.arange(self.clean_labels.size) if index is None else np.asarray(index)
        header = ['index', 'clean_label', 'noisy_label', 'flipped']
        if self.realized_rates is not None:
            header.append('realized_rate')
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for i in range(self.clean_labels.size):
                row = [int(ids[i]), int(self.clean_labels[i]),
                       int(self.noisy_labels[i]), int(bool(self.flip_mask[i]))]
                if self.realized_rates is not None:
                    row.append(repr(float(self.realized_rates[i])))
                writer.writerow(row)
        return path


def _check_classes(K: int) -> None:
    if K < 2:
        raise ParameterError(f"Label noise needs K >= 2 classes, got K={K}")


def _prepare_labels(labels: Sequence[int], K: int) -> np.ndarray:
    _check_classes(K)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ContractError(f"Labels must be 1-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"Labels must lie in [0, {K})")
    return labels


def _check_eta(eta: float, upper: float = 1.0, inclusive: bool = False) -> None:
    ok = 0.0 <= eta <= upper if inclusive else 0.0 <= eta < upper
    if not ok:
        bound = f"<= {upper}" if inclusive else f"< {upper}"
        raise ParameterError(f"Noise rate must satisfy 0 <= eta {bound}, got {eta}")


def _flip_mask(rng: np.random.Generator, n: int, eta: float) -> np.ndarray:
    return rng.random(n) < eta


def _record(clean: np.ndarray, noisy: np.ndarray, **extra: Any) -> CorruptionRecord:
    record = CorruptionRecord(clean, noisy, noisy != clean, **extra)
    logger.info("Corrupted %d labels, realized flip rate %.4f",
                clean.size, record.flip_rate)
    return record


def corrupt_symmetric(labels: Sequence[int], K: int, eta: float, rng_seed: int,
                      jobs: int = 1) -> CorruptionRecord:
    """Flip each label with probability ``eta`` to a uniformly random other class."""
    clean = _prepare_labels(labels, K)
    _check_eta(eta)

    def chunk(index: int, span: range) -> np.ndarray:
        rng = make_rng(rng_seed, 'noise-symmetric', index)
        y = clean[span.start:span.stop]
        flips = _flip_mask(rng, y.size, eta)
        offsets = rng.integers(1, K, size=y.size)
        return np.where(flips, (y + offsets) % K, y)

    parts = map_chunks(chunk, clean.size, jobs=jobs)
    noisy = np.concatenate(parts) if parts else clean.copy()
    return _record(clean, noisy)


def corrupt_asymmetric_circular(labels: Sequence[int], K: int, eta: float,
                                rng_seed: int, jobs: int = 1) -> CorruptionRecord:
    """Flip each label with probability ``eta`` to ``(y + 1) mod K``."""
    clean = _prepare_labels(labels, K)
    _check_eta(eta)
    if eta >= 0.5:
        logger.warning("Circular noise with eta=%.3g is not clean-label dominant", eta)

    def chunk(index: int, span: range) -> np.ndarray:
        rng = make_rng(rng_seed, 'noise-circular', index)
        y = clean[span.start:span.stop]
        return np.where(_flip_mask(rng, y.size, eta), (y + 1) % K, y)

    parts = map_chunks(chunk, clean.size, jobs=jobs)
    noisy = np.concatenate(parts) if parts else clean.copy()
    return _record(clean, noisy)


def sample_flip_rates(rng: np.random.Generator, n: int, eta: float,
                      rate_std: float) -> np.ndarray:
    """Draw per-instance flip rates from ``Normal(eta, rate_std)`` on ``[0, 1]``."""
    if rate_std == 0:
        return np.full(n, float(eta))
    lower, upper = (0.0 - eta) / rate_std, (1.0 - eta) / rate_std
    return stats.truncnorm.rvs(lower, upper, loc=eta, scale=rate_std,
                               size=n, random_state=rng)


def instance_transition_rows(features: np.ndarray, labels: np.ndarray,
                             rates: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """Per-instance label distributions for instance-dependent noise.

    Row ``i`` puts ``1 - q_i`` on the clean label and spreads ``q_i`` over
    the other classes by the softmax of ``x_i @ W[y_i]``.
    """
    K = projection.shape[0]
    n = labels.size
    scores = np.empty((n, K))
    for c in range(K):
        members = labels == c
        if members.any():
            scores[members] = features[members] @ projection[c]
    rows = np.arange(n)
    scores[rows, labels] = -np.inf
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    weights *= rates[:, None]
    weights[rows, labels] = 1.0 - rates
    return weights


def _sample_rows(rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(rows, axis=1)
    cumulative /= cumulative[:, -1:]
    draws = rng.random(rows.shape[0])
    return (cumulative < draws[:, None]).sum(axis=1).astype(np.int64)


def corrupt_instance_dependent(features: np.ndarray, labels: Sequence[int], K: int,
                               eta: float, rate_std: float = DEFAULT_RATE_STD,
                               rng_seed: int = 0, jobs: int = 1) -> CorruptionRecord:
    """Corrupt labels with instance-dependent (part-dependent style) noise.

    Steps: draw ``q_i`` from a normal truncated to ``[0, 1]``; draw a
    projection ``W`` of shape ``K x d x K``; score ``x_i @ W[y_i]`` with the
    clean class masked out; softmax and scale by ``q_i``; put ``1 - q_i`` on
    the clean class; sample the noisy label from that row.
    """
    clean = _prepare_labels(labels, K)
    _check_eta(eta, MAX_INSTANCE_ETA, inclusive=True)
    if rate_std < 0:
        raise ParameterError(f"rate_std must be >= 0, got {rate_std}")
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] != clean.size:
        raise ContractError(
            f"Features must be an N x d matrix with N={clean.size}, "
            f"got shape {features.shape}"
        )
    if not np.all(np.isfinite(features)):
        raise ContractError("Features must be finite")

    projection = make_rng(rng_seed, 'noise-projection').standard_normal(
        (K, features.shape[1], K)
    )

    def chunk(index: int, span: range):
        rng = make_rng(rng_seed, 'noise-instance', index)
        y = clean[span.start:span.stop]
        rates = sample_flip_rates(rng, y.size, eta, rate_std)
        rows = instance_transition_rows(features[span.start:span.stop], y,
                                        rates, projection)
        return rates, rows, _sample_rows(rng, rows)

    parts = map_chunks(chunk, clean.size, jobs=jobs)
    if not parts:
        empty = np.empty(0)
        return _record(clean, clean.copy(), realized_rates=empty,
                       transition_rows=np.empty((0, K)))
    rates = np.concatenate([p[0] for p in parts])
    rows = np.concatenate([p[1] for p in parts])
    noisy = np.concatenate([p[2] for p in parts])
    return _record(clean, noisy, realized_rates=rates, transition_rows=rows)


def corrupt(noise: NoiseModel, labels: Sequence[int], K: int, rng_seed: int,
            features: Optional[np.ndarray] = None, jobs: int = 1) -> CorruptionRecord:
    """Apply ``noise`` to ``labels``; features are needed for instance noise."""
    if noise.kind is NoiseKind.SYMMETRIC:
        return corrupt_symmetric(labels, K, noise.eta, rng_seed, jobs=jobs)
    if noise.kind is NoiseKind.ASYMMETRIC:
        return corrupt_asymmetric_circular(labels, K, noise.eta, rng_seed, jobs=jobs)
    if features is None:
        raise ContractError("Instance-dependent noise requires features")
    return corrupt_instance_dependent(features, labels, K, noise.eta,
                                      noise.rate_std, rng_seed, jobs=jobs)


def empirical_transition_matrix(clean: Sequence[int], noisy: Sequence[int],
                                K: int) -> np.ndarray:
    """Row ``y`` is the distribution of noisy labels among clean label ``y``."""
    clean = _prepare_labels(clean, K)
    noisy = _prepare_labels(noisy, K)
    if clean.shape != noisy.shape:
        raise ContractError(
            f"Clean and noisy label sequences differ in length "
            f"({clean.size} vs {noisy.size})"
        )
    counts = np.bincount(clean * K + noisy, minlength=K * K).reshape(K, K)
    totals = counts.sum(axis=1)
    missing = np.flatnonzero(totals == 0)
    if missing.size:
        raise DegenerateClassError(
            f"Classes without clean samples: {', '.join(map(str, missing))}"
        )
    return counts / totals[:, None]
