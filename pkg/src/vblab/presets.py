"""Named loss settings used in the published experiments."""

from dataclasses import dataclass
from typing import Dict, List

from vblab.losses import LossSpec


@dataclass(frozen=True)
class Preset:
    """A named, ready-to-use loss configuration."""
    name: str
    description: str
    spec: LossSpec


# Preset Registry
PRESETS: Dict[str, Preset] = {
    'vce-a5': Preset(
        name='vce-a5',
        description='VCE with a=5 (gradient and accuracy curves)',
        spec=LossSpec.vce(5.0),
    ),
    'vel-a1.5': Preset(
        name='vel-a1.5',
        description='VEL with a=1.5 (gradient and accuracy curves)',
        spec=LossSpec.vel(1.5),
    ),
    'vsl-a0.1': Preset(
        name='vsl-a0.1',
        description='VSL with a=0.1 (gradient and accuracy curves)',
        spec=LossSpec.vsl(0.1),
    ),
    'nce+vce-c10': Preset(
        name='nce+vce-c10',
        description='NCE+VCE, alpha=1 beta=10 a=4 (10-class benchmark)',
        spec=LossSpec.combined(LossSpec.vce(4.0), alpha=1.0, beta=10.0),
    ),
    'nce+vel-c10': Preset(
        name='nce+vel-c10',
        description='NCE+VEL, alpha=1 beta=10 a=1.2 (10-class benchmark)',
        spec=LossSpec.combined(LossSpec.vel(1.2), alpha=1.0, beta=10.0),
    ),
    'nce+vsl-c10': Preset(
        name='nce+vsl-c10',
        description='NCE+VSL, alpha=1 beta=5 a=0.05 (10-class benchmark)',
        spec=LossSpec.combined(LossSpec.vsl(0.05), alpha=1.0, beta=5.0),
    ),
    'nce+vce-c100': Preset(
        name='nce+vce-c100',
        description='NCE+VCE, alpha=5 beta=1 a=0.4 (100-class benchmark)',
        spec=LossSpec.combined(LossSpec.vce(0.4), alpha=5.0, beta=1.0),
    ),
    'nce+vel-c100': Preset(
        name='nce+vel-c100',
        description='NCE+VEL, alpha=5 beta=1 a=5 (100-class benchmark)',
        spec=LossSpec.combined(LossSpec.vel(5.0), alpha=5.0, beta=1.0),
    ),
    'nce+vsl-c100': Preset(
        name='nce+vsl-c100',
        description='NCE+VSL, alpha=5 beta=1 a=0.65 (100-class benchmark)',
        spec=LossSpec.combined(LossSpec.vsl(0.65), alpha=5.0, beta=1.0),
    ),
}


def get_preset(name: str) -> Preset:
    """Get a preset by name."""
    if name not in PRESETS:
        raise ValueError(
            f"Unknown preset: {name}\n"
            f"Available presets: {', '.join(PRESETS.keys())}"
        )
    return PRESETS[name]


def list_presets() -> List[Preset]:
    """List all available presets."""
    return list(PRESETS.values())
