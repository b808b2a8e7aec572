"""Shared fixtures for the conformal-control test suite."""

import numpy as np
import pytest
import yaml

from conformal_control.config import Config, ExperimentConfig
from conformal_control.core import AlphaLadder, QuantileLadder, StepRecord


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs (deselect with -m 'not slow')")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ladder():
    return AlphaLadder((0.5, 0.2, 0.1))


@pytest.fixture
def small_encoder_kwargs():
    """A predictor small enough for fast tests."""
    return {'hidden': 8, 'heads': 2, 'window': 4, 'head_hidden': 8}


@pytest.fixture
def make_records():
    """Score observations ``ys`` against one fixed quantile ladder."""
    def build(ys, y_hat, q, tau=1):
        ladder_q = QuantileLadder.fixed(q)
        return [StepRecord.score(t, float(y), y_hat, tau, ladder_q) for t, y in enumerate(ys)]
    return build


@pytest.fixture
def quick_config(tmp_path):
    """A small synthetic experiment that runs in seconds."""
    overrides = {
        'dataset.name': 'toy',
        'dataset.synthetic': {'kind': 'ar-shift', 'T': 260, 'seed': 3, 'changepoints': [130],
                              'segments': [[0.0, 1.0, 0.5], [2.0, 2.0, 0.5]]},
        'methods': ['ncc', 'aci', 'splitcp'],
        'alphas': [0.5, 0.2, 0.1],
        'seeds': [0, 1],
        'split.warmup': 60,
        'split.fit_length': 30,
        'ncc.hidden': 8,
        'ncc.heads': 2,
        'ncc.window': 4,
        'ncc.head_hidden': 8,
        'ncc.stages': [5, 3, 3],
        'ncc.retrain_stages': [1, 1, 1],
        'ncc.retrain_interval': 50,
        'ncc.tta.max_iters': 10,
        'output.dir': str(tmp_path / 'out'),
    }
    path = tmp_path / 'conformal.yml'
    path.write_text(yaml.safe_dump(overrides))
    return Config(path)


@pytest.fixture
def quick_experiment(quick_config):
    return ExperimentConfig.from_config(quick_config)
