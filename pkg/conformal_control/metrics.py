"""
Probabilistic accuracy and calibration metrics over StepRecord streams.

CS, WIS, CRPS and DCS plus per-level coverage and width. Every stream
metric is a pure function of its records.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import AlphaLadder, StepRecord, intervals_nested
from .errors import InsufficientDataError, InvalidInputError, InvalidParameterError

logger = logging.getLogger(__name__)

W0 = 0.5


def _require_records(records: Sequence[StepRecord], what: str) -> List[StepRecord]:
    records = list(records)
    if not records:
        raise InsufficientDataError(f"{what} needs at least one record")
    return records


def _err_matrix(records: Sequence[StepRecord]) -> np.ndarray:
    return np.vstack([r.errs for r in records]).astype(np.float64)


def empirical_coverage(records: Sequence[StepRecord], alpha_index: int) -> float:
    """Fraction of steps whose interval at ``alpha_index`` covered the target."""
    records = _require_records(records, 'empirical_coverage')
    n = records[0].n
    if not 0 <= alpha_index < n:
        raise InvalidInputError(f"Alpha index {alpha_index} out of range for {n} levels")
    return float(1.0 - np.mean([r.errs[alpha_index] for r in records]))


def coverage_rates(records: Sequence[StepRecord]) -> np.ndarray:
    records = _require_records(records, 'coverage_rates')
    return 1.0 - _err_matrix(records).mean(axis=0)


def calibration_score(records: Sequence[StepRecord], ladder: AlphaLadder) -> float:
    """Mean |empirical coverage - nominal coverage| over the ladder's levels."""
    records = _require_records(records, 'calibration_score')
    if records[0].n != len(ladder):
        raise InvalidInputError(f"Records carry {records[0].n} levels, ladder has {len(ladder)}")
    return float(np.mean(np.abs(coverage_rates(records) - ladder.confidence_levels)))


def cumulative_calibration(records: Sequence[StepRecord], ladder: AlphaLadder) -> np.ndarray:
    """CS over the first k records, for every k."""
    records = _require_records(records, 'cumulative_calibration')
    errs = _err_matrix(records)
    k = np.arange(1, errs.shape[0] + 1)[:, None]
    coverage = 1.0 - np.cumsum(errs, axis=0) / k
    return np.mean(np.abs(coverage - ladder.confidence_levels), axis=1)


def coverage_gap_path(records: Sequence[StepRecord], alpha: float, alpha_index: int) -> np.ndarray:
    """Running |miscoverage - alpha| after every step."""
    records = _require_records(records, 'coverage_gap_path')
    errs = np.array([r.errs[alpha_index] for r in records], dtype=np.float64)
    return np.abs(np.cumsum(errs) / np.arange(1, len(errs) + 1) - alpha)


def dcs(records: Sequence[StepRecord]) -> float:
    """Share of steps whose interval ladder is nested."""
    records = _require_records(records, 'dcs')
    return float(np.mean([intervals_nested(r.intervals) for r in records]))


def mean_width(records: Sequence[StepRecord], alpha_index: int) -> float:
    """
    Average finite interval width at one level; empty intervals count as
    width 0. Infinite intervals are excluded; ``infinite_steps`` counts them.
    """
    records = _require_records(records, 'mean_width')
    widths = np.array([r.intervals[alpha_index, 1] - r.intervals[alpha_index, 0] for r in records])
    widths = np.where(np.isnan(widths), 0.0, widths)
    finite = np.isfinite(widths)
    if not finite.any():
        return float('inf')
    return float(widths[finite].mean())


def infinite_steps(records: Sequence[StepRecord], alpha_index: Optional[int] = None) -> int:
    """Number of steps with an infinite interval at ``alpha_index`` (any level when None)."""
    records = _require_records(records, 'infinite_steps')
    hi = np.array([r.intervals[:, 1] for r in records])
    if alpha_index is not None:
        hi = hi[:, alpha_index:alpha_index + 1]
    return int(np.isinf(hi).any(axis=1).sum())


def score_cap(records: Sequence[StepRecord]) -> float:
    """Largest observed score of a stream, the half-width infinite intervals are clamped to."""
    records = _require_records(records, 'score_cap')
    scores = np.array([r.s for r in records], dtype=np.float64)
    scores = scores[np.isfinite(scores)]
    return float(scores.max()) if len(scores) else 0.0


def _interval_bounds(intervals: np.ndarray, centre: float, cap: Optional[float] = None) -> np.ndarray:
    """
    Replace empty (NaN) intervals by the degenerate interval at ``centre``;
    with ``cap``, infinite bounds are clamped to ``centre -/+ cap``.
    """
    arr = np.array(intervals, dtype=np.float64).reshape(-1, 2)
    arr[np.isnan(arr[:, 0])] = centre
    if cap is not None:
        arr[:, 0] = np.where(np.isinf(arr[:, 0]), centre - cap, arr[:, 0])
        arr[:, 1] = np.where(np.isinf(arr[:, 1]), centre + cap, arr[:, 1])
    return arr


def wis(y: float, median: float, intervals, ladder: AlphaLadder, cap: Optional[float] = None) -> float:
    """
    Weighted interval score with w0 = 1/2 and w_k = alpha_k / 2.

    Args:
        y: observed target
        median: predictive median (the point forecast for absolute-residual scores)
        intervals: per-alpha (lo, hi); ``None`` or NaN rows mark empty intervals
        ladder: alpha ladder the intervals are indexed by
        cap: half-width that infinite intervals are clamped to; without it an
            infinite interval gives an infinite score
    """
    alphas = ladder.as_array()
    if np.any(alphas <= 0):
        raise InvalidParameterError("WIS is undefined for alpha = 0")
    rows = [(np.nan, np.nan) if iv is None else iv for iv in intervals] \
        if not isinstance(intervals, np.ndarray) else intervals
    bounds = _interval_bounds(np.asarray(rows, dtype=np.float64), median, cap)
    if bounds.shape[0] != len(alphas):
        raise InvalidInputError(f"Got {bounds.shape[0]} intervals for {len(alphas)} levels")
    lo, hi = bounds[:, 0], bounds[:, 1]
    width = hi - lo
    below = np.where(y < lo, 2.0 * (lo - y) / alphas, 0.0)
    above = np.where(y > hi, 2.0 * (y - hi) / alphas, 0.0)
    interval_scores = width + below + above
    total = W0 * abs(y - median) + np.sum(alphas / 2.0 * interval_scores)
    return float(total / (len(alphas) + 0.5))


def pinball(u, tau):
    """Quantile loss rho_tau(u) = max(tau * u, (tau - 1) * u)."""
    u = np.asarray(u, dtype=np.float64)
    return np.maximum(tau * u, (tau - 1.0) * u)


def crps(y: float, levels, values) -> float:
    """
    CRPS from predictive quantiles as (2/L) * sum of pinball losses.

    Args:
        y: observed target
        levels: strictly increasing quantile levels in (0, 1)
        values: non-decreasing predictive quantiles at those levels
    """
    levels = np.asarray(levels, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if levels.shape != values.shape or levels.ndim != 1 or len(levels) == 0:
        raise InvalidInputError(f"levels {levels.shape} and values {values.shape} must be equal 1-D")
    if np.any((levels <= 0) | (levels >= 1)) or np.any(np.diff(levels) <= 0):
        raise InvalidInputError(f"Quantile levels must be strictly increasing in (0, 1): {levels}")
    if np.any(np.diff(values) < 0):
        raise InvalidInputError("Quantile values cross; rearrange (sort) them first")
    return float(2.0 / len(levels) * np.sum(pinball(y - values, levels)))


def record_quantiles(record: StepRecord, ladder: AlphaLadder, cap: Optional[float] = None):
    """
    Predictive quantiles implied by a record's interval ladder.

    Each alpha contributes its lower bound at level alpha/2 and upper bound
    at 1 - alpha/2; the point forecast is the median. Empty intervals
    collapse to the point forecast, infinite bounds are clamped to
    ``y_hat -/+ cap`` when a cap is given, and crossing values are rearranged.
    """
    alphas = ladder.as_array()
    bounds = _interval_bounds(record.intervals, record.y_hat, cap)
    levels = np.concatenate([alphas[::-1] / 2.0, [0.5], 1.0 - alphas / 2.0])
    values = np.concatenate([bounds[::-1, 0], [record.y_hat], bounds[:, 1]])
    order = np.argsort(levels)
    return levels[order], np.sort(values[order])


@dataclass
class MetricReport:
    """Aggregate metrics for one (method, horizon, seed) stream"""

    cs: float
    wis: float
    crps: float
    dcs: float
    coverage: Dict[float, float]
    n_steps: int
    width: Dict[float, float] = field(default_factory=dict)
    infinite: int = 0

    def to_row(self) -> Dict[str, float]:
        row = {'cs': self.cs, 'wis': self.wis, 'crps': self.crps, 'dcs': self.dcs,
               'n_steps': self.n_steps, 'infinite': self.infinite}
        for alpha, value in self.coverage.items():
            row[f'coverage@{alpha:g}'] = value
        for alpha, value in self.width.items():
            row[f'width@{alpha:g}'] = value
        return row

    def describe(self) -> str:
        lines = [
            f"steps: {self.n_steps}",
            f"CS:   {self.cs:.4f}",
            f"WIS:  {self.wis:.4f}",
            f"CRPS: {self.crps:.4f}",
            f"DCS:  {self.dcs:.4f}",
        ]
        if self.infinite:
            lines.append(f"steps with an infinite interval: {self.infinite} (clamped in WIS/CRPS)")
        for alpha, value in self.coverage.items():
            lines.append(f"coverage at alpha={alpha:g}: {value:.4f} (nominal {1 - alpha:.2f})")
        return "\n".join(lines)


def evaluate(records: Sequence[StepRecord], ladder: AlphaLadder,
             sort: bool = False, cap: Optional[float] = None) -> MetricReport:
    """
    Compute the full metric suite.

    Infinite intervals (an adaptive level driven to or below zero) are
    clamped to ``y_hat -/+ cap`` for WIS and CRPS, so a saturated step adds
    a finite penalty instead of making the average infinite. The number of
    steps with an infinite interval is reported as ``infinite``.

    Args:
        records: scored steps
        ladder: alpha ladder
        sort: rearrange each step's quantile ladder before scoring
        cap: clamp half-width; defaults to the largest score in ``records``
    """
    records = _require_records(records, 'evaluate')
    if cap is None:
        cap = score_cap(records)
    if sort:
        records = [r.sorted(ladder) for r in records]
    wis_values = [wis(r.y, r.y_hat, r.intervals, ladder, cap) for r in records]
    crps_values = [crps(r.y, *record_quantiles(r, ladder, cap)) for r in records]
    rates = coverage_rates(records)
    report = MetricReport(
        cs=calibration_score(records, ladder),
        wis=float(np.mean(wis_values)),
        crps=float(np.mean(crps_values)),
        dcs=dcs(records),
        coverage={alpha: float(rates[i]) for i, alpha in enumerate(ladder)},
        n_steps=len(records),
        width={alpha: mean_width(records, i) for i, alpha in enumerate(ladder)},
        infinite=infinite_steps(records),
    )
    logger.debug(f"Evaluated {report.n_steps} steps: CS={report.cs:.4f} DCS={report.dcs:.3f}")
    return report


def evaluate_by_horizon(records: Sequence[StepRecord], ladder: AlphaLadder,
                        sort: bool = False) -> Dict[Optional[int], MetricReport]:
    """
    Per-horizon reports plus a pooled one under the key ``None``; all of
    them clamp infinite intervals to the pooled stream's largest score.
    """
    records = _require_records(records, 'evaluate_by_horizon')
    cap = score_cap(records)
    by_tau: Dict[Optional[int], List[StepRecord]] = {}
    for r in records:
        by_tau.setdefault(r.tau, []).append(r)
    reports: Dict[Optional[int], MetricReport] = {
        tau: evaluate(group, ladder, sort=sort, cap=cap) for tau, group in sorted(by_tau.items())
    }
    reports[None] = evaluate(records, ladder, sort=sort, cap=cap)
    return reports
