"""
Series data: synthetic shift benchmarks and CSV ingestion.

Series CSVs have the header ``t,y[,region][,view:<name>...]``; rows of
one region must have strictly increasing ``t``.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .controller import SeriesInput
from .errors import InvalidParameterError, SchemaError

logger = logging.getLogger(__name__)

KINDS = ('ar-shift', 'seasonal-burst', 'iid-gauss')
VIEW_PREFIX = 'view:'
DEFAULT_SEGMENTS = ((0.0, 1.0, 0.5), (3.0, 4.0, 0.8), (-1.0, 1.0, 0.3))


@dataclass(frozen=True)
class Segment:
    mean: float
    variance: float
    ar: float = 0.0


@dataclass(frozen=True)
class SyntheticRecipe:
    """
    Piecewise-stationary series generator.

    ``segments`` has one entry per stretch between changepoints; when empty,
    a default mean/variance/AR cycle is used. ``regions`` > 1 generates
    series that share the segment dynamics with independent noise and a
    per-region level offset.
    """

    kind: str = 'ar-shift'
    T: int = 2000
    changepoints: Tuple[int, ...] = ()
    segments: Tuple[Segment, ...] = ()
    seed: int = 0
    regions: int = 1
    region_offset: float = 1.0
    period: int = 24
    amplitude: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"Unknown synthetic kind {self.kind!r} (choose {', '.join(KINDS)})")
        if self.T < 2:
            raise InvalidParameterError(f"Synthetic length T must be >= 2, got {self.T}")
        if self.regions < 1:
            raise InvalidParameterError(f"regions must be >= 1, got {self.regions}")
        cps = tuple(int(c) for c in self.changepoints)
        if any(b <= a for a, b in zip(cps, cps[1:])) or any(not 1 <= c <= self.T for c in cps):
            raise InvalidParameterError(f"Changepoints must be strictly increasing within [1, {self.T}]: {cps}")
        segments = tuple(s if isinstance(s, Segment) else Segment(*s) for s in self.segments)
        if not segments:
            segments = tuple(Segment(*DEFAULT_SEGMENTS[i % len(DEFAULT_SEGMENTS)]) for i in range(len(cps) + 1))
        if len(segments) != len(cps) + 1:
            raise InvalidParameterError(
                f"{len(cps)} changepoints need {len(cps) + 1} segments, got {len(segments)}"
            )
        for seg in segments:
            if not seg.variance > 0:
                raise InvalidParameterError(f"Segment variance must be positive: {seg}")
            if not -1.0 < seg.ar < 1.0:
                raise InvalidParameterError(f"Segment AR coefficient must be in (-1, 1): {seg}")
        object.__setattr__(self, 'changepoints', cps)
        object.__setattr__(self, 'segments', segments)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "SyntheticRecipe":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if 'changepoints' in known:
            known['changepoints'] = tuple(known['changepoints'] or ())
        if 'segments' in known:
            known['segments'] = tuple(tuple(s) for s in (known['segments'] or ()))
        return cls(**known)

    def with_seed(self, seed: int) -> "SyntheticRecipe":
        return replace(self, seed=seed)

    def segment_index(self) -> np.ndarray:
        """Segment id of every time step."""
        return np.searchsorted(np.asarray(self.changepoints, dtype=np.int64), np.arange(self.T), side='right')


def _generate_region(recipe: SyntheticRecipe, region: int) -> np.ndarray:
    rng = np.random.default_rng([recipe.seed, region])
    seg = recipe.segment_index()
    mean = np.array([s.mean for s in recipe.segments])[seg]
    var = np.array([s.variance for s in recipe.segments])[seg]
    noise = rng.standard_normal(recipe.T)
    if recipe.kind == 'iid-gauss':
        y = mean + np.sqrt(var) * noise
    elif recipe.kind == 'ar-shift':
        phi = np.array([s.ar for s in recipe.segments])[seg]
        innovation = np.sqrt(var * (1.0 - phi ** 2)) * noise
        x = np.empty(recipe.T)
        x[0] = np.sqrt(var[0]) * noise[0]
        for t in range(1, recipe.T):
            x[t] = phi[t] * x[t - 1] + innovation[t]
        y = mean + x
    else:
        season = recipe.amplitude * np.sin(2.0 * np.pi * np.arange(recipe.T) / recipe.period)
        y = mean + season + np.sqrt(var) * noise
    return y + region * recipe.region_offset


def synth(recipe: SyntheticRecipe) -> pd.DataFrame:
    """Generate the recipe's series as a long-format frame (t, y[, region])."""
    frames = []
    for r in range(recipe.regions):
        frame = pd.DataFrame({'t': np.arange(recipe.T, dtype=np.int64), 'y': _generate_region(recipe, r)})
        if recipe.regions > 1:
            frame['region'] = f'r{r}'
        frames.append(frame)
    df = pd.concat(frames, ignore_index=True)
    logger.info(f"Generated {recipe.kind} series: T={recipe.T}, regions={recipe.regions}, "
                f"changepoints={list(recipe.changepoints)}")
    return df


def write_series(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format='%.17g')
    logger.info(f"Wrote {len(df)} rows to {path}")
    return path


@dataclass
class RegionSeries:
    label: str
    index: int
    times: np.ndarray
    series: SeriesInput


@dataclass
class Dataset:
    name: str
    regions: List[RegionSeries]
    view_names: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def region(self, label: str) -> RegionSeries:
        for r in self.regions:
            if r.label == label:
                return r
        raise InvalidParameterError(f"Dataset {self.name} has no region {label!r}")


def _numeric_column(df: pd.DataFrame, col: str, source: str, integer: bool = False) -> np.ndarray:
    values = pd.to_numeric(df[col], errors='coerce')
    bad = values.isna().to_numpy() | ~np.isfinite(values.to_numpy(dtype=np.float64, na_value=np.nan))
    if integer:
        bad |= ~bad & (values.to_numpy(dtype=np.float64, na_value=0.0) % 1 != 0)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        kind = 'an integer' if integer else 'a number'
        raise SchemaError(f"{source}: row {row + 2}, column {col}: expected {kind}, got {df[col].iloc[row]!r}")
    return values.to_numpy(dtype=np.int64 if integer else np.float64)


def dataset_from_frame(df: pd.DataFrame, name: str, source: Optional[str] = None) -> Dataset:
    """Validate a long-format frame and split it into per-region series."""
    source = source or name
    missing = [c for c in ('t', 'y') if c not in df.columns]
    if missing:
        raise SchemaError(f"{source}: missing column(s) {', '.join(missing)} (header must start t,y)")
    view_cols = [c for c in df.columns if str(c).startswith(VIEW_PREFIX)]
    extra = [c for c in df.columns if c not in ('t', 'y', 'region') and c not in view_cols]
    if extra:
        logger.warning(f"{source}: ignoring unknown column(s) {', '.join(map(str, extra))}")

    t = _numeric_column(df, 't', source, integer=True)
    y = _numeric_column(df, 'y', source)
    views = {c[len(VIEW_PREFIX):]: _numeric_column(df, c, source) for c in view_cols}
    labels = df['region'].astype(str).to_numpy() if 'region' in df.columns else np.full(len(df), 'all')

    regions = []
    for index, label in enumerate(pd.unique(labels)):
        rows = np.flatnonzero(labels == label)
        steps = np.diff(t[rows])
        if np.any(steps <= 0):
            row = int(rows[1:][steps <= 0][0])
            raise SchemaError(f"{source}: row {row + 2}: t={t[row]} does not increase for region {label}")
        regions.append(RegionSeries(
            label=str(label), index=index, times=t[rows],
            series=SeriesInput(y[rows], {k: v[rows] for k, v in views.items()}, region=index),
        ))
    return Dataset(name=name, regions=regions, view_names=tuple(views))


def ingest(path, name: Optional[str] = None) -> Dataset:
    """Load a series CSV into a Dataset."""
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"{path}: cannot read series: {e}") from e
    dataset = dataset_from_frame(df, name or path.stem, str(path))
    logger.info(f"Loaded {path}: {dataset.n_regions} region(s), {len(df)} rows, views {list(dataset.view_names)}")
    return dataset


def synthetic_dataset(recipe: SyntheticRecipe, name: Optional[str] = None) -> Dataset:
    return dataset_from_frame(synth(recipe), name or recipe.kind)
