"""Per-sample classification losses and their exact gradients.

All losses are written as functions of the softmax output ``u``; gradients
are taken with respect to ``u`` (the nn module composes the softmax
Jacobian). Logarithms are natural logs, and probabilities are clamped to
``[EPS, 1 - EPS]`` before any logarithm of a probability is taken.

Single-argument losses depend only on the label component ``u_y`` through a
scalar curve ``l(u)``:

    CE   -log u
    MAE  2 (1 - u)
    EL   exp(-u)                       (VEL with a = e)
    SL   [log(u + 1) - log 2]^2        (VSL with a = 1)
    VCE  -log(u + a)                   a >= 0
    VEL  a^(-u)                        a > 1
    VSL  [log(a u + 1) - log 2]^2 / a  0 < a <= 1

NCE uses every component, ``(-log u_y) / (-sum_k log u_k)``, and the
combined loss is ``alpha * NCE + beta * VBL``.
"""

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from vblab.errors import ContractError, ParameterError, UnsupportedFamilyError
from vblab.logging import get_logger

logger = get_logger('losses')

EPS = 1e-7
SIMPLEX_TOL = 1e-9


class Family(str, Enum):
    """Loss families understood by vblab."""
    CE = 'ce'
    MAE = 'mae'
    EL = 'el'
    SL = 'sl'
    VCE = 'vce'
    VEL = 'vel'
    VSL = 'vsl'
    NCE = 'nce'
    COMBINED = 'combined'


SINGLE_FAMILIES = frozenset({
    Family.CE, Family.MAE, Family.EL, Family.SL,
    Family.VCE, Family.VEL, Family.VSL,
})
VARIATION_BOUNDED = frozenset({Family.VCE, Family.VEL, Family.VSL})
HYPERPARAMETER_FAMILIES = VARIATION_BOUNDED


@dataclass(frozen=True)
class FamilyInfo:
    """Registry entry describing a loss family."""
    name: str
    description: str
    constraint: str = ''


FAMILIES: Dict[str, FamilyInfo] = {
    'ce': FamilyInfo('ce', 'Cross entropy, -log u_y (variation-unbounded)'),
    'mae': FamilyInfo('mae', 'Mean absolute error, 2(1 - u_y) (symmetric)'),
    'el': FamilyInfo('el', 'Exponential loss, exp(-u_y)'),
    'sl': FamilyInfo('sl', 'Square log loss, [log(u_y + 1) - log 2]^2'),
    'vce': FamilyInfo('vce', 'Variation-bounded cross entropy, -log(u_y + a)',
                      'a >= 0'),
    'vel': FamilyInfo('vel', 'Variation-bounded exponential loss, a^(-u_y)',
                      'a > 1'),
    'vsl': FamilyInfo('vsl', 'Variation-bounded square log, '
                      '[log(a u_y + 1) - log 2]^2 / a', '0 < a <= 1'),
    'nce': FamilyInfo('nce', 'Normalized cross entropy (symmetric, active)'),
    'combined': FamilyInfo('combined', 'alpha * NCE + beta * (VCE | VEL | VSL)',
                           'alpha >= 0, beta >= 0'),
}


def parse_family(name: Union[str, Family]) -> Family:
    """Turn a family name (case-insensitive) into a ``Family``."""
    if isinstance(name, Family):
        return name
    key = str(name).strip().lower()
    if key in ('nce+vbl', 'apl'):
        key = 'combined'
    try:
        return Family(key)
    except ValueError:
        raise ParameterError(
            f"Unknown loss family: {name}\n"
            f"Available families: {', '.join(FAMILIES.keys())}"
        )


def _check_hyperparameter(family: Family, a: Optional[float]) -> None:
    if family not in HYPERPARAMETER_FAMILIES:
        return
    if a is None or not math.isfinite(a):
        raise ParameterError(f"{family.name} requires a finite hyperparameter a")
    if family is Family.VCE and a < 0:
        raise ParameterError(f"VCE requires a >= 0, got a={a}")
    if family is Family.VEL and a <= 1:
        raise ParameterError(f"VEL requires a > 1, got a={a}")
    if family is Family.VSL and not 0 < a <= 1:
        raise ParameterError(f"VSL requires 0 < a <= 1, got a={a}")


@dataclass(frozen=True)
class LossSpec:
    """A loss family plus its hyperparameters.

    ``a`` is used by VCE/VEL/VSL only. ``scale`` multiplies a single loss
    (value and gradient). A combined spec holds an NCE ``active`` part and a
    variation-bounded ``passive`` part weighted by ``alpha`` and ``beta``.
    """
    family: Family
    a: Optional[float] = None
    scale: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    active: Optional['LossSpec'] = None
    passive: Optional['LossSpec'] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, 'family', parse_family(self.family))
        if self.a is not None:
            object.__setattr__(self, 'a', float(self.a))
        _check_hyperparameter(self.family, self.a)
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ParameterError(f"scale must be positive, got {self.scale}")

        if self.family is Family.COMBINED:
            if self.alpha < 0 or self.beta < 0:
                raise ParameterError(
                    f"Combined loss requires alpha >= 0 and beta >= 0, "
                    f"got alpha={self.alpha}, beta={self.beta}"
                )
            if self.active is None or self.active.family is not Family.NCE:
                raise ParameterError("Combined loss requires an NCE active part")
            if self.passive is None or self.passive.family not in VARIATION_BOUNDED:
                raise ParameterError(
                    "Combined loss requires a VCE, VEL or VSL passive part"
                )
        elif self.active is not None or self.passive is not None:
            raise ParameterError(
                f"{self.family.name} does not take active/passive parts"
            )

    # Constructors ---------------------------------------------------------

    @classmethod
    def ce(cls) -> 'LossSpec':
        return cls(Family.CE)

    @classmethod
    def mae(cls) -> 'LossSpec':
        return cls(Family.MAE)

    @classmethod
    def el(cls) -> 'LossSpec':
        return cls(Family.EL)

    @classmethod
    def sl(cls) -> 'LossSpec':
        return cls(Family.SL)

    @classmethod
    def vce(cls, a: float) -> 'LossSpec':
        return cls(Family.VCE, a=a)

    @classmethod
    def vel(cls, a: float) -> 'LossSpec':
        return cls(Family.VEL, a=a)

    @classmethod
    def vsl(cls, a: float) -> 'LossSpec':
        return cls(Family.VSL, a=a)

    @classmethod
    def nce(cls) -> 'LossSpec':
        return cls(Family.NCE)

    @classmethod
    def combined(cls, passive: 'LossSpec', alpha: float = 1.0,
                 beta: float = 1.0) -> 'LossSpec':
        return cls(Family.COMBINED, alpha=alpha, beta=beta,
                   active=cls.nce(), passive=passive)

    # Helpers ----------------------------------------------------------------

    @property
    def is_single(self) -> bool:
        """True for losses that depend on ``u_y`` alone."""
        return self.family in SINGLE_FAMILIES

    @property
    def label(self) -> str:
        """Short display name, e.g. ``VCE(a=4)`` or ``NCE+VEL(...)``."""
        if self.family is Family.COMBINED:
            assert self.passive is not None
            return (f"NCE+{self.passive.family.name}"
                    f"(alpha={self.alpha:g},beta={self.beta:g},a={self.passive.a:g})")
        if self.family in HYPERPARAMETER_FAMILIES:
            return f"{self.family.name}(a={self.a:g})"
        return self.family.name

    def with_parameter(self, name: str, value: float) -> 'LossSpec':
        """Copy with one of ``a``/``alpha``/``beta`` replaced.

        On a combined spec ``a`` addresses the passive part.
        """
        if name == 'a':
            if self.family is Family.COMBINED:
                assert self.passive is not None
                return replace(self, passive=replace(self.passive, a=value))
            if self.family not in HYPERPARAMETER_FAMILIES:
                raise ParameterError(f"{self.family.name} has no hyperparameter a")
            return replace(self, a=value)
        if name in ('alpha', 'beta'):
            if self.family is not Family.COMBINED:
                raise ParameterError(f"{name} only applies to combined losses")
            return replace(self, **{name: value})
        raise ParameterError(f"Unknown loss parameter: {name}")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {'family': self.family.value}
        if self.family is Family.COMBINED:
            assert self.passive is not None
            data.update(alpha=self.alpha, beta=self.beta,
                        passive=self.passive.to_dict())
            return data
        if self.a is not None:
            data['a'] = self.a
        if self.scale != 1.0:
            data['scale'] = self.scale
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LossSpec':
        """Build a spec from a config mapping.

        Combined specs accept either a nested ``passive`` mapping or the
        flat shorthand ``{"family": "combined", "passive_family": "vce",
        "a": 4, "alpha": 1, "beta": 10}``.
        """
        family = parse_family(data.get('family', ''))
        if family is Family.COMBINED:
            if 'passive' in data:
                passive = cls.from_dict(data['passive'])
            else:
                passive = cls(parse_family(data.get('passive_family', 'vce')),
                              a=data.get('a'))
            return cls.combined(passive, alpha=float(data.get('alpha', 1.0)),
                                beta=float(data.get('beta', 1.0)))
        return cls(family, a=data.get('a'), scale=float(data.get('scale', 1.0)))


@dataclass(frozen=True, eq=False)
class ProbabilityVector:
    """A point on the probability simplex (length K >= 2)."""
    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size < 2:
            raise ContractError(
                f"Probability vector must be 1-D with K >= 2, got shape {probs.shape}"
            )
        if not np.all(np.isfinite(probs)) or probs.min() < 0 or probs.max() > 1:
            raise ContractError("Probability components must lie in [0, 1]")
        total = float(probs.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise ContractError(f"Probabilities must sum to 1, got {total!r}")
        object.__setattr__(self, 'probs', probs)

    @property
    def K(self) -> int:
        return int(self.probs.size)

    def __getitem__(self, index: int) -> float:
        return float(self.probs[index])


ProbsLike = Union[ProbabilityVector, Sequence[float], np.ndarray]


def _as_probability_vector(probs: ProbsLike) -> ProbabilityVector:
    if isinstance(probs, ProbabilityVector):
        return probs
    return ProbabilityVector(np.asarray(probs, dtype=float))


def _clamp(u: np.ndarray) -> np.ndarray:
    return np.clip(u, EPS, 1.0 - EPS)


# Scalar curves l(u) and l'(u) -----------------------------------------------

def curve_value(spec: LossSpec, u: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Evaluate ``l(u)`` elementwise for a single-argument loss."""
    if not spec.is_single:
        raise UnsupportedFamilyError(f"{spec.family.name} is not a single-argument loss")
    u = np.asarray(u, dtype=float)
    family = spec.family
    if family is Family.MAE:
        values = 2.0 * (1.0 - u)
    elif family in (Family.EL, Family.VEL):
        a = math.e if family is Family.EL else spec.a
        values = np.power(a, -u)
    else:
        v = _clamp(u) if clamp else u
        with np.errstate(divide='ignore'):
            if family is Family.CE:
                values = -np.log(v)
            elif family is Family.VCE:
                values = -np.log(v + spec.a)
            else:
                a = 1.0 if family is Family.SL else spec.a
                values = (np.log(a * v + 1.0) - math.log(2.0)) ** 2 / a
    return spec.scale * values


def curve_derivative(spec: LossSpec, u: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Evaluate ``dl/du`` elementwise for a single-argument loss.

    With ``clamp=False`` the formula is taken at ``u`` itself, which lets the
    analysis module read off endpoint limits (possibly infinite).
    """
    if not spec.is_single:
        raise UnsupportedFamilyError(f"{spec.family.name} is not a single-argument loss")
    u = np.asarray(u, dtype=float)
    family = spec.family
    if family is Family.MAE:
        grads = np.full_like(u, -2.0)
    elif family in (Family.EL, Family.VEL):
        a = math.e if family is Family.EL else spec.a
        grads = -np.power(a, -u) * math.log(a)
    else:
        v = _clamp(u) if clamp else u
        with np.errstate(divide='ignore'):
            if family is Family.CE:
                grads = -1.0 / v
            elif family is Family.VCE:
                grads = -1.0 / (v + spec.a)
            else:
                a = 1.0 if family is Family.SL else spec.a
                grads = 2.0 * (np.log(a * v + 1.0) - math.log(2.0)) / (a * v + 1.0)
    return spec.scale * grads


# Batched values and gradients -----------------------------------------------

def _check_batch(probs: np.ndarray, labels: np.ndarray) -> None:
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ContractError(f"Expected an N x K probability matrix, got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ContractError(
            f"Expected {probs.shape[0]} labels, got shape {labels.shape}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ContractError(f"Labels must lie in [0, {probs.shape[1]})")


def _nce_values(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logs = -np.log(_clamp(probs))
    rows = np.arange(probs.shape[0])
    return logs[rows, labels] / logs.sum(axis=1)


def _nce_grads(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    u = _clamp(probs)
    logs = -np.log(u)
    rows = np.arange(probs.shape[0])
    numer = logs[rows, labels]
    denom = logs.sum(axis=1)
    grads = (numer / denom ** 2)[:, None] / u
    grads[rows, labels] -= 1.0 / (u[rows, labels] * denom)
    return grads


def batch_loss_values(spec: LossSpec, probs: np.ndarray,
                      labels: np.ndarray) -> np.ndarray:
    """Per-row loss values for an ``N x K`` probability matrix."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    _check_batch(probs, labels)
    if spec.family is Family.NCE:
        return spec.scale * _nce_values(probs, labels)
    if spec.family is Family.COMBINED:
        assert spec.active is not None and spec.passive is not None
        return (spec.alpha * batch_loss_values(spec.active, probs, labels)
                + spec.beta * batch_loss_values(spec.passive, probs, labels))
    rows = np.arange(probs.shape[0])
    return curve_value(spec, probs[rows, labels])


def batch_loss_grads(spec: LossSpec, probs: np.ndarray,
                     labels: np.ndarray) -> np.ndarray:
    """Per-row gradients ``dL/du`` for an ``N x K`` probability matrix."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    _check_batch(probs, labels)
    if spec.family is Family.NCE:
        return spec.scale * _nce_grads(probs, labels)
    if spec.family is Family.COMBINED:
        assert spec.active is not None and spec.passive is not None
        return (spec.alpha * batch_loss_grads(spec.active, probs, labels)
                + spec.beta * batch_loss_grads(spec.passive, probs, labels))
    rows = np.arange(probs.shape[0])
    grads = np.zeros_like(probs)
    grads[rows, labels] = curve_derivative(spec, probs[rows, labels])
    return grads


# Single-sample operations ---------------------------------------------------

def _single(probs: ProbsLike, label: int):
    vector = _as_probability_vector(probs)
    if not 0 <= int(label) < vector.K:
        raise ContractError(f"Label {label} outside [0, {vector.K})")
    return vector.probs[None, :], np.array([int(label)])


def loss_value(spec: LossSpec, probs: ProbsLike, label: int) -> float:
    """Loss of one prediction against one label.

    Example:
        >>> round(loss_value(LossSpec.vce(0.0), [0.5, 0.5], 0), 6)
        0.693147
    """
    batch, labels = _single(probs, label)
    return float(batch_loss_values(spec, batch, labels)[0])


def loss_grad(spec: LossSpec, probs: ProbsLike, label: int) -> np.ndarray:
    """Gradient of the loss with respect to the probability vector."""
    batch, labels = _single(probs, label)
    return batch_loss_grads(spec, batch, labels)[0]


def grad_magnitude_curve(spec: LossSpec, n_points: int) -> np.ndarray:
    """Sample ``|dl/du|`` on a uniform grid over ``[EPS, 1 - EPS]``.

    Returns:
        Array of shape ``(n_points, 2)`` with columns ``u`` and ``grad_abs``.
    """
    if n_points < 2:
        raise ParameterError(f"n_points must be >= 2, got {n_points}")
    if not spec.is_single:
        raise UnsupportedFamilyError(
            f"Gradient curves are defined for single-argument losses, "
            f"not {spec.family.name}"
        )
    u = np.linspace(EPS, 1.0 - EPS, n_points)
    return np.column_stack([u, np.abs(curve_derivative(spec, u))])


def write_curve_csv(curve: np.ndarray, path: Path) -> Path:
    """Write a gradient curve as CSV with header ``u,grad_abs``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['u', 'grad_abs'])
        for u, g in curve:
            writer.writerow([repr(float(u)), repr(float(g))])
    logger.info("Wrote %d curve points to %s", len(curve), path)
    return path


def list_families() -> List[FamilyInfo]:
    """List all registered loss families."""
    return list(FAMILIES.values())
