"""
vblab - Variation-bounded losses for learning with noisy labels

Loss families with bounded gradient variation, robustness certificates
computed from them, label-noise generators and a small training harness
to compare losses on corrupted data.
"""

from vblab._version import __version__
from vblab.analysis import (
    asymmetry_threshold,
    certify_asymmetric,
    excess_risk_bound_general,
    excess_risk_bound_symmetric,
    variation_ratio_closed,
    variation_ratio_numeric,
)
from vblab.losses import LossSpec, loss_grad, loss_value
from vblab.noise import NoiseModel, corrupt
from vblab.trainer import ExperimentConfig, run_experiment, sweep

__all__ = [
    'LossSpec',
    'NoiseModel',
    'ExperimentConfig',
    'loss_value',
    'loss_grad',
    'variation_ratio_closed',
    'variation_ratio_numeric',
    'excess_risk_bound_symmetric',
    'excess_risk_bound_general',
    'asymmetry_threshold',
    'certify_asymmetric',
    'corrupt',
    'run_experiment',
    'sweep',
    '__version__',
]
