"""Configuration system for vblab.

Two layers: user defaults from ``~/.vblab.toml`` (seed, jobs, training
defaults) and per-experiment JSON files consumed by ``vblab train`` and
``vblab sweep``.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional

from vblab.errors import ConfigError
from vblab.logging import get_logger

logger = get_logger('config')

try:
    import tomllib  # Python 3.11+
except ImportError:
    try:
        import tomli as tomllib  # Python 3.8-3.10
    except ImportError:
        tomllib = None


CONFIG_ENV = 'VBLAB_CONFIG'
SEED_ENV = 'VBLAB_SEED'
FALLBACK_SEED = 123
SCHEMA_VERSION = 1

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    'run': {
        'seed': FALLBACK_SEED,
        'jobs': 1,
        'deterministic': True,
    },
    'train': {
        'epochs': 100,
        'batch_size': 128,
        'lr': 0.01,
        'momentum': 0.9,
        'l1_decay': 5e-5,
        'schedule': 'cosine',
        'eval_every': 1,
        'ece_bins': 10,
    },
}


def default_config_path() -> Path:
    """Location of the user config file (``$VBLAB_CONFIG`` wins)."""
    override = os.environ.get(CONFIG_ENV)
    if override:
        return Path(override)
    return Path.home() / '.vblab.toml'


class Config:
    """Configuration manager for vblab user defaults."""

    def __init__(self, path: Optional[Path] = None):
        self.config = copy.deepcopy(DEFAULT_CONFIG)
        self.path = Path(path) if path else default_config_path()
        self._load_config()

    def _load_config(self) -> None:
        """Load configuration from the TOML file if it exists."""
        if not self.path.exists():
            return

        if tomllib is None:
            logger.warning(
                "Cannot parse %s - install 'tomli' package for Python < 3.11",
                self.path
            )
            return

        try:
            with open(self.path, 'rb') as f:
                self._merge_config(tomllib.load(f))
        except (OSError, PermissionError) as e:
            logger.warning("Error reading config file %s: %s", self.path, e)
        except ValueError as e:
            # TOMLDecodeError is a ValueError subclass
            logger.warning("Error parsing config from %s: %s", self.path, e)

    def _merge_config(self, user_config: Dict[str, Any]) -> None:
        """Merge user config with defaults."""
        for section, values in user_config.items():
            if section in self.config and isinstance(values, dict):
                self.config[section].update(values)
            else:
                self.config[section] = values

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """Get a configuration value."""
        return self.config.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value: Any) -> None:
        """Set a configuration value (runtime only, not persisted)."""
        self.config.setdefault(section, {})[key] = value

    def resolve_seed(self, explicit: Optional[int] = None) -> int:
        """Pick the run seed: flag, then ``$VBLAB_SEED``, then the file."""
        if explicit is not None:
            return int(explicit)
        env_seed = os.environ.get(SEED_ENV)
        if env_seed:
            try:
                return int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}")
        return int(self.get('run', 'seed', FALLBACK_SEED))


def create_default_config_file(path: Optional[Path] = None) -> Path:
    """Write a commented default config file and return its path."""
    config_path = Path(path) if path else default_config_path()

    if config_path.exists():
        response = input(f"{config_path} already exists. Overwrite? (y/N): ")
        if response.lower() != 'y':
            print("Aborted.")
            return config_path

    default_toml = """# vblab configuration
# Place this file at ~/.vblab.toml (or point $VBLAB_CONFIG at it)

[run]
seed = 123            # $VBLAB_SEED and --seed take precedence
jobs = 1              # worker cap for sweeps and corruption
deterministic = true  # recorded in resolved configs; --no-deterministic overrides

[train]
epochs = 100
batch_size = 128
lr = 0.01
momentum = 0.9
l1_decay = 5e-5
schedule = "cosine"   # constant | cosine | exponential
eval_every = 1
ece_bins = 10
"""

    config_path.write_text(default_toml)
    print(f"Created default configuration at {config_path}")
    return config_path


def load_experiment_file(path: Path) -> Dict[str, Any]:
    """Read an experiment JSON file and check its schema version.

    Section-level key checking happens in ``ExperimentConfig.from_dict``;
    this only guards the envelope.

    Raises:
        ConfigError: Missing file, invalid JSON, or unsupported version.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in {path}: {e}")
    if not isinstance(document, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")

    version = document.get('version')
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"Unsupported config version {version!r} in {path} "
            f"(expected {SCHEMA_VERSION})"
        )
    return document


def check_keys(section: str, values: Dict[str, Any], allowed) -> None:
    """Reject keys outside ``allowed`` so typos fail fast."""
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(
            f"Unknown key(s) in '{section}': {', '.join(unknown)}\n"
            f"Allowed keys: {', '.join(sorted(allowed))}"
        )


# Global config instance
_config = None


def get_config() -> Config:
    """Get the global configuration instance."""
    global _config
    if _config is None:
        _config = Config()
    return _config


def reset_config() -> None:
    """Drop the cached global config (used after env changes)."""
    global _config
    _config = None
