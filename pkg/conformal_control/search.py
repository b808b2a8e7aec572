"""
Hyperparameter search over dotted config keys.

Every candidate is a full validation run; candidates are ranked per
method by pooled CS, ties broken by WIS.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
import yaml
from sklearn.model_selection import ParameterGrid, ParameterSampler

from .config import Config, ExperimentConfig
from .errors import ConfigError, ConformalControlError
from .runner import execute, metrics_frame

logger = logging.getLogger(__name__)


def load_grid(path) -> Dict[str, List[Any]]:
    """Read a YAML mapping of dotted config keys to candidate value lists."""
    path = Path(path)
    try:
        with open(path) as f:
            grid = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot read search grid {path}: {e}") from e
    if not isinstance(grid, dict) or not grid:
        raise ConfigError(f"{path}: grid must be a non-empty mapping of key -> list of values")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{path}: grid entry {key!r} must be a non-empty list")
    return grid


def candidates(grid: Dict[str, List[Any]], n_iter: Optional[int] = None, seed: int = 0) -> List[Dict[str, Any]]:
    """All grid points, or ``n_iter`` sampled ones."""
    if n_iter is None:
        return list(ParameterGrid(grid))
    if n_iter < 1:
        raise ConfigError(f"n_iter must be >= 1, got {n_iter}")
    total = len(ParameterGrid(grid))
    return list(ParameterSampler(grid, n_iter=min(n_iter, total), random_state=seed))


def search(config: Config, grid: Dict[str, List[Any]], n_iter: Optional[int] = None,
           seed: int = 0) -> pd.DataFrame:
    """
    Evaluate every candidate configuration and rank them.

    Args:
        config: base configuration; candidates override its keys
        grid: dotted key -> candidate values
        n_iter: sample this many candidates instead of the full grid
        seed: sampling seed

    Returns:
        One row per (candidate, method) with the pooled CS and WIS
        averaged over regions and seeds, best first within each method.
    """
    rows = []
    points = candidates(grid, n_iter, seed)
    logger.info(f"Searching {len(points)} candidate(s) over {', '.join(sorted(grid))}")
    for i, params in enumerate(points):
        label = ', '.join(f"{k}={v}" for k, v in sorted(params.items()))
        try:
            cfg = ExperimentConfig.from_config(config.with_overrides(params))
            results = execute(cfg)
        except ConformalControlError as e:
            logger.warning(f"Candidate {i} ({label}) rejected: {e}")
            continue
        failed = [r for r in results if r.error is not None]
        if failed:
            logger.warning(f"Candidate {i} ({label}): {len(failed)} cell(s) failed, e.g. {failed[0].error}")
        frame = metrics_frame([r for r in results if r.error is None], cfg.ladder)
        if frame.empty:
            continue
        pooled = frame[frame['horizon'] == 'pooled']
        for method, group in pooled.groupby('method', sort=True):
            rows.append({'candidate': i, **params, 'method': method,
                         'cs': float(group['cs'].mean()), 'wis': float(group['wis'].mean())})
        logger.debug(f"Candidate {i} ({label}) done")

    if not rows:
        raise ConformalControlError("No search candidate produced results")
    table = pd.DataFrame(rows).sort_values(['method', 'cs', 'wis', 'candidate'], kind='stable')
    table['rank'] = table.groupby('method').cumcount() + 1
    return table.reset_index(drop=True)


def best_params(table: pd.DataFrame, method: str) -> Dict[str, Any]:
    """Parameters of the top-ranked candidate for a method."""
    top = table[(table['method'] == method) & (table['rank'] == 1)]
    if top.empty:
        raise ConformalControlError(f"No search results for method {method!r}")
    drop = {'candidate', 'method', 'cs', 'wis', 'rank'}
    return {k: v for k, v in top.iloc[0].items() if k not in drop}
