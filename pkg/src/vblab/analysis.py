"""Robustness certificates for single-argument losses.

Given a loss curve ``l(u)`` this module computes

- the variation ratio ``sup|l'| / inf|l'|`` over ``(0, 1)`` (closed form and a
  grid oracle) and the normalization constant ``1 / inf|l'|``;
- the bounded-sum defect: how far ``sum_k c * l(u_k)`` moves across the
  simplex, which never exceeds ``v - 1``;
- excess-risk bounds under symmetric and under general (class- or
  instance-dependent) noise;
- the noise-dependent ratio threshold below which a loss is asymmetric, and
  asymmetry certificates for explicit risk weights, together with a simplex
  grid search that checks them by brute force.

Infinite ratios are represented by ``math.inf`` and serialized as ``"inf"``.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from vblab.errors import (
    ContractError,
    InvalidWeightsError,
    NotCleanDominantError,
    ParameterError,
    ResourceLimitError,
    UnboundedLossError,
    UnsupportedFamilyError,
)
from vblab.logging import get_logger
from vblab.losses import (
    Family,
    LossSpec,
    batch_loss_values,
    curve_derivative,
    curve_value,
)
from vblab.noise import CorruptionRecord, NoiseKind, NoiseModel
from vblab.rng import make_rng, map_chunks

logger = get_logger('analysis')

GRID_DELTA = 1e-6
UNBOUNDED_THRESHOLD = 1e9
RATIO_RTOL = 1e-12
MAX_BRUTEFORCE_CLASSES = 4
MAX_GRID_RESOLUTION = 0.02


def json_real(value: Optional[float]) -> Any:
    if value is None:
        return None
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return value


class Method(str, Enum):
    CLOSED_FORM = 'closed_form'
    NUMERIC_GRID = 'numeric_grid'


@dataclass(frozen=True)
class VariationReport:
    """Gradient extrema of a loss curve and the derived ratio."""
    loss: str
    grad_abs_min: float
    grad_abs_max: float
    variation_ratio: float
    normalization_c: float
    method: Method
    exceeds_threshold: bool = False

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.variation_ratio)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'loss': self.loss,
            'grad_abs_min': json_real(self.grad_abs_min),
            'grad_abs_max': json_real(self.grad_abs_max),
            'variation_ratio': json_real(self.variation_ratio),
            'normalization_c': json_real(self.normalization_c),
            'method': self.method.value,
            'exceeds_threshold': self.exceeds_threshold,
        }


class BoundKind(str, Enum):
    SYMMETRIC = 'symmetric_noise'
    GENERAL = 'general_noise'


@dataclass(frozen=True)
class BoundReport:
    """An excess-risk bound and the noise constants it was built from.

    ``c_const`` and ``a_const`` are noise constants, unrelated to the
    normalization constant and to the loss hyperparameter ``a``.
    """
    kind: BoundKind
    risk_gap_bound: float
    c_const: float
    variation_ratio: float
    a_const: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            'kind': self.kind.value,
            'risk_gap_bound': json_real(self.risk_gap_bound),
            'c_const': self.c_const,
            'variation_ratio': json_real(self.variation_ratio),
        }
        if self.a_const is not None:
            data['a_const'] = self.a_const
        return data


class Certificate(str, Enum):
    CERTIFIED_BY_RATIO = 'certified_by_ratio'
    CERTIFIED_BY_CONCAVITY = 'certified_by_concavity'
    NOT_CERTIFIED = 'not_certified'


@dataclass(frozen=True)
class SimplexArgmin:
    """Best lattice point of a brute-force simplex search."""
    point: np.ndarray
    value: float


# Variation ratio ------------------------------------------------------------

def _require_single(spec: LossSpec) -> None:
    if not spec.is_single:
        raise UnsupportedFamilyError(
            f"The variation ratio is not defined for {spec.family.name}"
        )


def _closed_extrema(spec: LossSpec) -> Tuple[float, float]:
    family, a = spec.family, spec.a
    ln2 = math.log(2.0)
    if family is Family.CE:
        low, high = 1.0, math.inf
    elif family is Family.MAE:
        low, high = 2.0, 2.0
    elif family is Family.EL:
        low, high = math.exp(-1.0), 1.0
    elif family is Family.SL:
        low, high = 0.0, 2.0 * ln2
    elif family is Family.VCE:
        assert a is not None
        low, high = 1.0 / (1.0 + a), (1.0 / a if a > 0 else math.inf)
    elif family is Family.VEL:
        assert a is not None
        low, high = math.log(a) / a, math.log(a)
    else:
        assert a is not None
        low = 2.0 * (ln2 - math.log(a + 1.0)) / (a + 1.0)
        high = 2.0 * ln2
    return spec.scale * low, spec.scale * high


def _report(spec: LossSpec, low: float, high: float, method: Method,
            exceeds: bool = False) -> VariationReport:
    if low <= 0 or math.isinf(high) or exceeds:
        ratio = math.inf
    else:
        ratio = max(high / low, 1.0)
    c = 1.0 / low if low > 0 else math.inf
    return VariationReport(spec.label, low, high, ratio, c, method, exceeds)


def variation_ratio_closed(spec: LossSpec) -> VariationReport:
    """Closed-form gradient extrema and variation ratio.

    Example:
        >>> variation_ratio_closed(LossSpec.vce(4.0)).variation_ratio
        1.25
    """
    _require_single(spec)
    low, high = _closed_extrema(spec)
    return _report(spec, low, high, Method.CLOSED_FORM)


def variation_ratio_numeric(spec: LossSpec, grid_steps: int = 100_000) -> VariationReport:
    """Grid estimate of the variation ratio.

    ``|l'|`` is evaluated on a uniform grid over ``(1e-6, 1 - 1e-6)`` and at
    both endpoint limits. Ratios above ``1e9`` are reported as unbounded.
    """
    _require_single(spec)
    if grid_steps < 1000:
        raise ParameterError(f"grid_steps must be >= 1000, got {grid_steps}")
    grid = np.linspace(GRID_DELTA, 1.0 - GRID_DELTA, grid_steps)
    u = np.concatenate([[0.0], grid, [1.0]])
    magnitudes = np.abs(curve_derivative(spec, u, clamp=False))
    low, high = float(magnitudes.min()), float(magnitudes.max())
    exceeds = low <= 0 or not math.isfinite(high) or high / low > UNBOUNDED_THRESHOLD
    if exceeds:
        logger.info("%s: numeric gradient ratio exceeds %.0e, treating as unbounded",
                    spec.label, UNBOUNDED_THRESHOLD)
    return _report(spec, low, high, Method.NUMERIC_GRID, exceeds)


def _bounded_report(spec: LossSpec) -> VariationReport:
    report = variation_ratio_closed(spec)
    if not report.bounded:
        raise UnboundedLossError(f"{spec.label} has an unbounded variation ratio")
    return report


# Bounded-sum defect ---------------------------------------------------------

def symmetric_defect(spec: LossSpec, K: int, n_pairs: int, rng_seed: int,
                     jobs: int = 1) -> float:
    """Largest observed ``|sum_k c l(u_k) - sum_k c l(v_k)|`` over random pairs.

    Pairs are drawn from the uniform Dirichlet distribution; the result never
    exceeds ``v - 1`` for a bounded loss.
    """
    report = _bounded_report(spec)
    if K < 2:
        raise ParameterError(f"K must be >= 2, got {K}")
    if n_pairs < 1:
        raise ParameterError(f"n_pairs must be >= 1, got {n_pairs}")
    c = report.normalization_c
    alpha = np.ones(K)

    def chunk(index: int, span: range) -> float:
        rng = make_rng(rng_seed, 'dirichlet', index)
        first = rng.dirichlet(alpha, size=len(span))
        second = rng.dirichlet(alpha, size=len(span))
        gap = c * (curve_value(spec, first).sum(axis=1)
                   - curve_value(spec, second).sum(axis=1))
        return float(np.abs(gap).max())

    defect = max(map_chunks(chunk, n_pairs, jobs=jobs))
    logger.debug("%s K=%d: defect %.3g over %d pairs (bound %.3g)",
                 spec.label, K, defect, n_pairs, report.variation_ratio - 1.0)
    return defect


# Excess-risk bounds ---------------------------------------------------------

def excess_risk_bound_symmetric(spec: LossSpec, K: int, eta: float) -> BoundReport:
    """Bound ``c (v - 1)`` with ``c = eta / ((1 - eta) K - 1)``."""
    if K < 2:
        raise ParameterError(f"K must be >= 2, got {K}")
    if not 0.0 <= eta < 1.0 - 1.0 / K:
        raise ParameterError(
            f"Symmetric noise bound requires 0 <= eta < 1 - 1/K = {1 - 1 / K:.6g}, "
            f"got eta={eta}"
        )
    v = _bounded_report(spec).variation_ratio
    c = eta / ((1.0 - eta) * K - 1.0)
    return BoundReport(BoundKind.SYMMETRIC, c * (v - 1.0), c, v)


@dataclass(frozen=True)
class NoiseProfile:
    """Per-instance (or per-class) clean and worst-wrong label probabilities."""
    clean: np.ndarray
    worst_wrong: np.ndarray

    @property
    def dominant(self) -> bool:
        return bool(np.all(self.clean > self.worst_wrong))


def _rows_profile(rows: np.ndarray, labels: np.ndarray) -> NoiseProfile:
    index = np.arange(labels.size)
    clean = rows[index, labels]
    wrong = rows.copy()
    wrong[index, labels] = -np.inf
    return NoiseProfile(clean, wrong.max(axis=1))


def noise_profile(noise: NoiseModel, K: int,
                  record: Optional[CorruptionRecord] = None) -> NoiseProfile:
    """Clean-label and largest wrong-label probabilities under ``noise``.

    Symmetric and circular noise are described exactly by their class-level
    transition matrix; instance-dependent noise uses the realized rows of a
    corruption ``record``.
    """
    if noise.kind is NoiseKind.INSTANCE:
        if record is None or record.transition_rows is None:
            raise ContractError(
                "Instance-dependent noise needs a corruption record with "
                "transition rows"
            )
        return _rows_profile(record.transition_rows, record.clean_labels)
    return _rows_profile(noise.transition_matrix(K), np.arange(K))


def _dominant_profile(noise: NoiseModel, K: int,
                      record: Optional[CorruptionRecord]) -> NoiseProfile:
    profile = noise_profile(noise, K, record)
    if not profile.dominant:
        raise NotCleanDominantError(
            f"{noise.kind.value} noise with eta={noise.eta} (K={K}) is not "
            f"clean-label dominant"
        )
    return profile


def excess_risk_bound_general(spec: LossSpec, noise: NoiseModel, K: int,
                              record: Optional[CorruptionRecord] = None) -> BoundReport:
    """Bound ``(1 + c/a)(v - 1)`` for class- or instance-dependent noise.

    ``c`` is the mean clean-label probability and ``a`` the smallest margin
    ``1 - eta_x - eta_{x,k}`` over instances and wrong classes.
    """
    profile = _dominant_profile(noise, K, record)
    v = _bounded_report(spec).variation_ratio
    c_const = float(profile.clean.mean())
    a_const = float((profile.clean - profile.worst_wrong).min())
    bound = (1.0 + c_const / a_const) * (v - 1.0)
    return BoundReport(BoundKind.GENERAL, bound, c_const, v, a_const)


def asymmetry_threshold(noise: NoiseModel, K: int,
                        record: Optional[CorruptionRecord] = None) -> float:
    """Worst-case ``(1 - eta_x) / max_{k != y} eta_{x,k}``.

    Any loss whose variation ratio does not exceed this value is asymmetric
    (hence noise-tolerant) under ``noise``. Noise-free models give ``inf``.

    Symmetric and circular noise use the closed forms
    ``(K - 1) / eta - (K - 1)`` and ``1 / eta - 1``.

    Example:
        >>> asymmetry_threshold(NoiseModel.symmetric(0.8), 10)
        2.25
    """
    profile = _dominant_profile(noise, K, record)
    if noise.kind is not NoiseKind.INSTANCE:
        if noise.eta == 0:
            return math.inf
        wrong = K - 1 if noise.kind is NoiseKind.SYMMETRIC else 1
        return wrong / noise.eta - wrong
    worst = profile.worst_wrong
    ratios = np.full(worst.shape, np.inf)
    noisy = worst > 0
    ratios[noisy] = profile.clean[noisy] / worst[noisy]
    return float(ratios.min())


def certified_under_noise(spec: LossSpec, noise: NoiseModel, K: int,
                          record: Optional[CorruptionRecord] = None) -> bool:
    """True when ``v(L)`` is within the asymmetry threshold of ``noise``."""
    v = variation_ratio_closed(spec).variation_ratio
    threshold = asymmetry_threshold(noise, K, record)
    return v <= threshold * (1.0 + RATIO_RTOL)


# Asymmetry certificates -----------------------------------------------------

def _is_concave(spec: LossSpec) -> bool:
    family = spec.family
    if family is Family.MAE:
        return True
    if family in (Family.CE, Family.VCE, Family.VEL, Family.EL):
        return False
    # Square-log curves: check the sign of l'' numerically.
    u = np.linspace(1e-3, 1.0 - 1e-3, 1001)
    second = np.gradient(curve_derivative(spec, u), u)
    return bool(np.all(second <= 0))


def _dominant_index(weights: Sequence[float]) -> Tuple[np.ndarray, int]:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise InvalidWeightsError("Weights must be a vector with K >= 2 entries")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidWeightsError("Weights must be finite and nonnegative")
    t = int(np.argmax(w))
    if np.count_nonzero(w == w[t]) > 1:
        raise InvalidWeightsError(f"Largest weight {w[t]} is not unique")
    return w, t


def certify_asymmetric(spec: LossSpec, weights: Sequence[float]) -> Certificate:
    """Try to certify that ``sum_k w_k L(u, k)`` is minimized at ``e_t``.

    Concavity of the curve is checked first, then the ratio condition
    ``v(L) <= w_t / w_i`` for every ``i != t``. ``NOT_CERTIFIED`` proves
    nothing either way.
    """
    _require_single(spec)
    w, t = _dominant_index(weights)
    if _is_concave(spec):
        return Certificate.CERTIFIED_BY_CONCAVITY
    runner_up = float(np.delete(w, t).max())
    limit = w[t] / runner_up if runner_up > 0 else math.inf
    v = variation_ratio_closed(spec).variation_ratio
    if v <= limit * (1.0 + RATIO_RTOL):
        return Certificate.CERTIFIED_BY_RATIO
    return Certificate.NOT_CERTIFIED


def _compositions(n: int, parts: int) -> Iterator[Tuple[int, ...]]:
    """All ways to write ``n`` as ``parts`` ordered nonnegative integers, in
    lexicographic order."""
    if parts == 1:
        yield (n,)
        return
    for first in range(n + 1):
        for rest in _compositions(n - first, parts - 1):
            yield (first,) + rest


def simplex_lattice(K: int, grid_resolution: float) -> np.ndarray:
    """Lattice points of the simplex at spacing ``grid_resolution``."""
    steps = int(round(1.0 / grid_resolution))
    if steps < 1 or abs(steps * grid_resolution - 1.0) > 1e-9:
        raise ParameterError(
            f"1/grid_resolution must be an integer, got resolution {grid_resolution}"
        )
    counts = np.array(list(_compositions(steps, K)), dtype=float)
    return counts / steps


def weighted_risk(spec: LossSpec, points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_k w_k L(u, k)`` for every row ``u`` of ``points``."""
    if spec.is_single:
        return curve_value(spec, points) @ weights
    total = np.zeros(points.shape[0])
    for k, w_k in enumerate(weights):
        if w_k:
            labels = np.full(points.shape[0], k, dtype=np.int64)
            total += w_k * batch_loss_values(spec, points, labels)
    return total


def argmin_weighted_risk_bruteforce(spec: LossSpec, weights: Sequence[float],
                                    grid_resolution: float = 0.01) -> SimplexArgmin:
    """Minimize ``sum_k w_k L(u, k)`` over the simplex lattice.

    Ties go to the lexicographically smallest lattice point.
    """
    w = np.asarray(weights, dtype=float)
    K = w.size
    if K > MAX_BRUTEFORCE_CLASSES:
        raise ResourceLimitError(
            f"Brute-force search supports K <= {MAX_BRUTEFORCE_CLASSES}, got K={K}"
        )
    if K < 2:
        raise ParameterError(f"K must be >= 2, got {K}")
    if not 0 < grid_resolution <= MAX_GRID_RESOLUTION:
        raise ParameterError(
            f"grid_resolution must lie in (0, {MAX_GRID_RESOLUTION}], "
            f"got {grid_resolution}"
        )
    points = simplex_lattice(K, grid_resolution)
    risks = weighted_risk(spec, points, w)
    best = int(np.argmin(risks))
    return SimplexArgmin(points[best], float(risks[best]))


# Empirical risk -------------------------------------------------------------

def empirical_risk(spec: LossSpec, model, dataset) -> float:
    """Mean loss of ``model`` over ``dataset``.

    With corrupted labels in ``dataset`` this estimates the noisy risk.
    """
    if dataset.features.shape[0] == 0:
        raise ContractError("Dataset is empty")
    if model.num_classes != dataset.K:
        raise ContractError(
            f"Model outputs {model.num_classes} classes, dataset has K={dataset.K}"
        )
    _, probs = model.forward(dataset.features)
    return float(batch_loss_values(spec, probs, dataset.labels).mean())
