"""
Configuration parser for conformal.yml experiment files.
"""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .core import DEFAULT_ALPHAS, AlphaLadder
from .errors import ConfigError, ConformalControlError

logger = logging.getLogger(__name__)

CONFIG_NAME = 'conformal.yml'
METHODS = ('ncc', 'ncc-t', 'ncc-m', 'aci', 'cpid', 'nexcp', 'splitcp')
FORECASTERS = ('ar', 'theta', 'gru', 'external')

DEFAULT_CONFIG = {
    'version': 1,
    'dataset': {
        'name': None,
        'path': None,
        'external_forecasts': None,
        'synthetic': {
            'kind': 'ar-shift',
            'T': 2000,
            'seed': 0,
            'regions': 1,
            'region_offset': 1.0,
            'changepoints': [],
            'segments': [],
        },
    },
    'methods': ['ncc', 'aci', 'cpid', 'nexcp', 'splitcp'],
    'alphas': list(DEFAULT_ALPHAS),
    'horizons': [1],
    'seeds': [0],
    'split': {
        'fit_length': None,
        'warmup': 200,
    },
    'forecaster': {
        'name': 'ar',
        'params': {'p': 3, 'ridge': 0.001},
    },
    'ncc': {
        'eta_scale': 0.1,
        'w': 10,
        'k_scale': 0.05,
        'lambdas': {'quantile': 1.0, 'coverage': 1.0, 'efficiency': 0.1, 'monotonicity': 1.0},
        'retrain_interval': 5,
        'stages': [100, 50, 50],
        'retrain_stages': [10, 5, 5],
        'lr': 0.01,
        'max_train_windows': 512,
        'hidden': 32,
        'heads': 4,
        'window': 32,
        'head_hidden': 64,
        'tta': {
            'enabled': True,
            'max_iters': 50,
            'step_scale': 0.01,
            'dcs_threshold': 1.0,
            'mode': 'mlp',
        },
    },
    'aci': {'eta': 0.05},
    'cpid': {'eta_scale': 0.1, 'ki_scale': 1.0, 'C': 1.0},
    'nexcp': {'rho': 0.99},
    'splitcp': {'bonferroni': False, 'window': None},
    'fewshot': {
        'target_region': -1,
        'target_burnin': 10,
        'eval_steps': 20,
    },
    'output': {
        'dir': 'results',
        'results': 'results.jsonl',
        'metrics': 'metrics.csv',
    },
    'workers': 1,
}

DEFAULT_CONFIG_YAML = """version: 1

# Data: either a CSV (header t,y[,region][,view:<name>...]) or a synthetic recipe
dataset:
  name: demo
  path: null
  # Optional upstream predictions (header t,tau,y_hat); replaces the base forecaster
  external_forecasts: null
  synthetic:
    kind: ar-shift          # ar-shift | seasonal-burst | iid-gauss
    T: 2000
    seed: 0
    regions: 1
    changepoints: [700, 1400]
    # one entry per segment: [mean, variance, ar coefficient]
    segments:
      - [0.0, 1.0, 0.5]
      - [3.0, 4.0, 0.8]
      - [-1.0, 1.0, 0.3]

# Controllers to compare: ncc, ncc-t (no TTA), ncc-m (no TTA, no monotonicity loss),
# aci, cpid, nexcp, splitcp
methods: [ncc, aci, cpid, nexcp, splitcp]

# Miscoverage ladder, strictly decreasing
alphas: [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02]
horizons: [1]
seeds: [0, 1, 2, 3]

split:
  # Base forecaster fit segment (defaults to warmup // 2)
  fit_length: null
  # First issue time whose intervals are scored
  warmup: 200

forecaster:
  name: ar                  # ar | theta | gru
  params:
    p: 3
    ridge: 0.001

# Flat dotted keys work too, e.g.  ncc.eta_scale: 0.5
ncc:
  eta_scale: 0.1            # eta = eta_scale * score scale
  w: 10
  k_scale: 0.05             # sigmoid temperature K = k_scale * score scale
  lambdas: {quantile: 1.0, coverage: 1.0, efficiency: 0.1, monotonicity: 1.0}
  retrain_interval: 5       # null disables retraining
  stages: [100, 50, 50]
  retrain_stages: [10, 5, 5]
  lr: 0.01
  window: 32
  tta:
    enabled: true
    max_iters: 50
    step_scale: 0.01
    dcs_threshold: 1.0
    mode: mlp               # mlp | vector

aci:
  eta: 0.05
cpid:
  eta_scale: 0.1
  ki_scale: 1.0
nexcp:
  rho: 0.99
splitcp:
  bonferroni: false

output:
  dir: results

# Parallel (method x region x seed) cells
workers: 1
"""


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Merge ``override`` into a copy of ``base``, nested dicts key by key."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def expand_dotted(flat: Dict[str, Any]) -> Dict[str, Any]:
    """Turn ``{'ncc.tta.max_iters': 10}`` into nested dicts; plain keys pass through."""
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if isinstance(value, dict):
            value = expand_dotted(value)
        parts = str(key).split('.')
        target = nested
        for part in parts[:-1]:
            existing = target.get(part)
            if not isinstance(existing, dict):
                existing = target[part] = {}
            target = existing
        leaf = parts[-1]
        if isinstance(value, dict) and isinstance(target.get(leaf), dict):
            target[leaf] = deep_merge(target[leaf], value)
        else:
            target[leaf] = value
    return nested


class Config:
    """Configuration manager for conformal-control experiments"""

    def __init__(self, config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None):
        """
        Load configuration from conformal.yml

        Args:
            config_path: Path to the config file (defaults to a search from the current directory)
            overrides: Extra (possibly dotted) keys applied on top of the file
        """
        self.config_path = Path(config_path) if config_path else self._find_config()
        self.config = self._load_config()
        if overrides:
            self.config = deep_merge(self.config, expand_dotted(overrides))

    def _find_config(self) -> Optional[Path]:
        """Find conformal.yml in current directory or parents"""
        current = Path.cwd()
        for _ in range(10):
            config_file = current / CONFIG_NAME
            if config_file.exists():
                logger.info(f"Found config: {config_file}")
                return config_file
            parent = current.parent
            if parent == current:
                break
            current = parent
        logger.warning(f"No {CONFIG_NAME} found, using defaults")
        return None

    def _load_config(self) -> Dict[str, Any]:
        """Load, expand dotted keys and merge over the defaults"""
        if not self.config_path:
            return copy.deepcopy(DEFAULT_CONFIG)
        if not self.config_path.exists():
            raise ConfigError(f"Config file not found: {self.config_path}")
        try:
            with open(self.config_path, 'r') as f:
                user_config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse {self.config_path}: {e}") from e
        if not isinstance(user_config, dict):
            raise ConfigError(f"{self.config_path}: top level must be a mapping")
        config = deep_merge(DEFAULT_CONFIG, expand_dotted(user_config))
        logger.info(f"Loaded config from {self.config_path}")
        return config

    def with_overrides(self, overrides: Dict[str, Any]) -> "Config":
        """A copy of this configuration with (possibly dotted) keys replaced"""
        clone = copy.copy(self)
        clone.config = deep_merge(self.config, expand_dotted(overrides))
        return clone

    def get(self, dotted: str, default: Any = None) -> Any:
        node: Any = self.config
        for part in dotted.split('.'):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.config.get(name) or {})

    @staticmethod
    def create_default_config(output_path: Path):
        """Create a default conformal.yml file"""
        with open(output_path, 'w') as f:
            f.write(DEFAULT_CONFIG_YAML)
        logger.info(f"Created default config: {output_path}")


@dataclass
class ExperimentConfig:
    """Validated, typed view of a Config"""

    dataset_name: str
    dataset_path: Optional[Path]
    synthetic: Dict[str, Any]
    external_forecasts: Optional[Path]
    methods: Tuple[str, ...]
    ladder: AlphaLadder
    horizons: Tuple[int, ...]
    seeds: Tuple[int, ...]
    fit_length: int
    warmup: int
    forecaster: str
    forecaster_params: Dict[str, Any]
    method_params: Dict[str, Dict[str, Any]]
    fewshot: Dict[str, Any]
    output_dir: Path
    results_name: str = 'results.jsonl'
    metrics_name: str = 'metrics.csv'
    workers: int = 1
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def results_path(self) -> Path:
        return self.output_dir / self.results_name

    @property
    def metrics_path(self) -> Path:
        return self.output_dir / self.metrics_name

    @property
    def window(self) -> int:
        return int(self.method_params['ncc']['window'])

    @classmethod
    def from_config(cls, config: Config) -> "ExperimentConfig":
        c = config.config
        try:
            ladder = AlphaLadder(tuple(c['alphas']))
        except (ConformalControlError, TypeError) as e:
            raise ConfigError(f"alphas: {e}") from e

        methods = tuple(c.get('methods') or ())
        unknown = [m for m in methods if m not in METHODS]
        if not methods or unknown:
            raise ConfigError(f"methods must be a non-empty subset of {', '.join(METHODS)}; got {list(methods)}")

        horizons = tuple(int(h) for h in (c.get('horizons') or ()))
        if not horizons or any(h < 1 for h in horizons) or len(set(horizons)) != len(horizons):
            raise ConfigError(f"horizons must be distinct integers >= 1, got {c.get('horizons')}")
        seeds = tuple(int(s) for s in (c.get('seeds') or ()))
        if not seeds:
            raise ConfigError("seeds must list at least one seed")

        split = c.get('split') or {}
        warmup = int(split.get('warmup') or 0)
        fit_length = split.get('fit_length')
        fit_length = warmup // 2 if fit_length is None else int(fit_length)
        ncc = dict(c['ncc'])
        if warmup < int(ncc['window']):
            raise ConfigError(f"split.warmup ({warmup}) must be >= the NCC context window ({ncc['window']})")
        if not 0 < fit_length <= warmup:
            raise ConfigError(f"split.fit_length ({fit_length}) must be in (0, warmup={warmup}]")

        fc = c.get('forecaster') or {}
        name = fc.get('name', 'ar')
        dataset = c.get('dataset') or {}
        external = dataset.get('external_forecasts')
        if name not in FORECASTERS:
            raise ConfigError(f"forecaster.name must be one of {', '.join(FORECASTERS)}, got {name!r}")
        if name == 'external' and not external:
            raise ConfigError("forecaster 'external' needs dataset.external_forecasts")
        if int(c.get('workers') or 1) < 1:
            raise ConfigError("workers must be >= 1")

        path = dataset.get('path')
        output = c.get('output') or {}
        return cls(
            dataset_name=str(dataset.get('name') or (Path(path).stem if path else dataset['synthetic']['kind'])),
            dataset_path=Path(path) if path else None,
            synthetic=dict(dataset.get('synthetic') or {}),
            external_forecasts=Path(external) if external else None,
            methods=methods,
            ladder=ladder,
            horizons=horizons,
            seeds=seeds,
            fit_length=fit_length,
            warmup=warmup,
            forecaster='external' if external else name,
            forecaster_params=dict(fc.get('params') or {}),
            method_params={m: dict(c.get(m) or {}) for m in ('ncc', 'aci', 'cpid', 'nexcp', 'splitcp')},
            fewshot=dict(c.get('fewshot') or {}),
            output_dir=Path(output.get('dir') or 'results'),
            results_name=output.get('results') or 'results.jsonl',
            metrics_name=output.get('metrics') or 'metrics.csv',
            workers=int(c.get('workers') or 1),
            raw=c,
        )

    @classmethod
    def load(cls, path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        return cls.from_config(Config(path, overrides))
