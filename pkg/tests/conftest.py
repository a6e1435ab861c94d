"""Shared fixtures: every test runs against an empty user config."""

import pytest

from vblab.config import CONFIG_ENV, SEED_ENV, reset_config
from vblab.logging import setup_logging


@pytest.fixture(autouse=True)
def isolated_config(tmp_path, monkeypatch):
    """Point ``$VBLAB_CONFIG`` at a missing file and clear ``$VBLAB_SEED``."""
    monkeypatch.setenv(CONFIG_ENV, str(tmp_path / 'no-such-config.toml'))
    monkeypatch.delenv(SEED_ENV, raising=False)
    reset_config()
    yield
    reset_config()
    # CLI tests reconfigure the package logger
    setup_logging()


@pytest.fixture
def blob_config():
    """A small, fast experiment document on synthetic blobs."""
    return {
        'version': 1,
        'dataset': {'kind': 'blobs', 'K': 3, 'per_class': 40, 'd': 4,
                    'separation': 6.0, 'test_fraction': 0.25},
        'noise': {'kind': 'symmetric', 'eta': 0.2},
        'loss': {'family': 'vce', 'a': 2.0},
        'model': {'hidden': [16]},
        'optimizer': {'lr': 0.1, 'momentum': 0.9, 'l1_decay': 0.0,
                      'schedule': 'cosine'},
        'training': {'epochs': 4, 'batch_size': 16, 'seed': 5},
    }
