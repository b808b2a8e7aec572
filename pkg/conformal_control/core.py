"""
Foundational types and functions shared by every conformal controller.

Scores are absolute residuals, intervals are symmetric around the point
forecast, and every per-alpha quantity is indexed by position in an
``AlphaLadder`` (largest miscoverage rate first).
"""

import math
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, InvalidParameterError, PipelineOrderError

logger = logging.getLogger(__name__)

# Pre-history padding: predictions (quantiles, scores) padded with zeros,
# coverage errors padded with ones.
PAD_ERR = 1.0
PAD_PREDICTION = 0.0

DEFAULT_ALPHAS = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02)


def _freeze(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AlphaLadder:
    """Strictly decreasing miscoverage rates in (0, 1)."""

    alphas: Tuple[float, ...]

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        if len(alphas) < 1:
            raise InvalidParameterError("Alpha ladder needs at least one level")
        for a in alphas:
            if not (0.0 < a < 1.0):
                raise InvalidParameterError(f"Alpha {a} outside the open interval (0, 1)")
        if any(b >= a for a, b in zip(alphas, alphas[1:])):
            raise InvalidParameterError(f"Alpha ladder must be strictly decreasing: {alphas}")
        object.__setattr__(self, 'alphas', alphas)

    @classmethod
    def default(cls) -> "AlphaLadder":
        return cls(DEFAULT_ALPHAS)

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "AlphaLadder":
        """Build a ladder from an unordered collection of rates."""
        return cls(tuple(sorted((float(v) for v in values), reverse=True)))

    def __len__(self) -> int:
        return len(self.alphas)

    def __iter__(self) -> Iterator[float]:
        return iter(self.alphas)

    def __getitem__(self, i: int) -> float:
        return self.alphas[i]

    @property
    def n(self) -> int:
        return len(self.alphas)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.alphas, dtype=np.float64)

    @property
    def confidence_levels(self) -> np.ndarray:
        return 1.0 - self.as_array()

    def index(self, alpha: float) -> int:
        for i, a in enumerate(self.alphas):
            if math.isclose(a, alpha, rel_tol=0.0, abs_tol=1e-12):
                return i
        raise InvalidInputError(f"Alpha {alpha} is not on the ladder {self.alphas}")


@dataclass(frozen=True)
class QuantileLadder:
    """
    Per-alpha score quantiles at one time step.

    ``q_conf = q_raw + adjustment + delta`` where ``delta`` is the
    conformalization offset and ``adjustment`` the test-time correction
    (zero unless TTA ran).
    """

    q_raw: np.ndarray
    delta: np.ndarray
    q_conf: np.ndarray
    adjustment: np.ndarray

    @classmethod
    def build(cls, q_raw, delta=None, adjustment=None) -> "QuantileLadder":
        q_raw = np.asarray(q_raw, dtype=np.float64)
        delta = np.zeros_like(q_raw) if delta is None else np.asarray(delta, dtype=np.float64)
        adjustment = np.zeros_like(q_raw) if adjustment is None else np.asarray(adjustment, dtype=np.float64)
        if not (q_raw.shape == delta.shape == adjustment.shape) or q_raw.ndim != 1:
            raise InvalidInputError(
                f"Ladder vectors must be 1-D with equal length, got "
                f"{q_raw.shape}, {delta.shape}, {adjustment.shape}"
            )
        with np.errstate(invalid='ignore'):
            q_conf = q_raw + adjustment + delta
        return cls(_freeze(q_raw), _freeze(delta), _freeze(q_conf), _freeze(adjustment))

    @classmethod
    def fixed(cls, q) -> "QuantileLadder":
        """A ladder whose quantiles need no adjustment (baseline controllers)."""
        return cls.build(q)

    def __len__(self) -> int:
        return len(self.q_conf)

    def raw_is_monotone(self) -> bool:
        """q_raw non-negative and non-decreasing along the ladder."""
        q = self.q_raw
        return bool(np.all(q >= 0.0) and np.all(np.diff(q) >= 0.0))


def nonconformity(y: float, y_hat: float) -> float:
    """Absolute-residual score |y - y_hat|."""
    if not (math.isfinite(y) and math.isfinite(y_hat)):
        raise InvalidInputError(f"Non-finite input to score: y={y}, y_hat={y_hat}")
    return abs(float(y) - float(y_hat))


def coverage_error(s: float, q: float) -> int:
    """1 if the score exceeds the quantile, else 0. s == q counts as covered."""
    if not math.isfinite(s) or math.isnan(q):
        raise InvalidInputError(f"Invalid score/quantile: s={s}, q={q}")
    return int(s > q)


def coverage_errors(s: float, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if not math.isfinite(s) or np.any(np.isnan(q)):
        raise InvalidInputError(f"Invalid score/quantiles: s={s}, q={q}")
    return (s > q).astype(np.int8)


def soft_error(s, q, K: float):
    """Sigmoid relaxation of the coverage error, sigmoid((s - q) / K)."""
    if not K > 0:
        raise InvalidParameterError(f"Sigmoid temperature K must be positive, got {K}")
    return expit((np.asarray(s, dtype=np.float64) - np.asarray(q, dtype=np.float64)) / K)


def running_error(errs: Sequence[float], T: Optional[int] = None, w: int = 1) -> float:
    """
    Windowed error rate over the ``w`` most recent observations up to ``T``.

    ``T`` counts observations (``errs[:T]`` are available); positions before
    the first observation are padded with ``PAD_ERR``.
    """
    if w < 1:
        raise InvalidParameterError(f"Window size must be >= 1, got {w}")
    errs = np.asarray(errs, dtype=np.float64)
    T = len(errs) if T is None else int(T)
    if T < 0 or T > len(errs):
        raise InvalidInputError(f"T={T} outside the available history of {len(errs)} errors")
    window = errs[max(0, T - w):T]
    n_pad = w - len(window)
    return float((window.sum() + n_pad * PAD_ERR) / w)


def running_error_path(errs: np.ndarray, w: int) -> np.ndarray:
    """
    Running errors after every prefix of an (N, n) error matrix.

    Row k holds ``running_error(errs[:, i], k, w)`` for every column i, so
    the result has N + 1 rows.
    """
    if w < 1:
        raise InvalidParameterError(f"Window size must be >= 1, got {w}")
    errs = np.asarray(errs, dtype=np.float64)
    if errs.ndim == 1:
        errs = errs[:, None]
    n_cols = errs.shape[1]
    padded = np.vstack([np.full((w, n_cols), PAD_ERR), errs])
    csum = np.vstack([np.zeros((1, n_cols)), np.cumsum(padded, axis=0)])
    # window ending after k real observations covers padded rows [k, k + w)
    ends = np.arange(errs.shape[0] + 1) + w
    return (csum[ends] - csum[ends - w]) / w


def interval_from_quantile(y_hat: float, q: float) -> Optional[Tuple[float, float]]:
    """Interval {y : |y - y_hat| <= q}; ``None`` marks the empty interval (q < 0)."""
    if not math.isfinite(y_hat):
        raise InvalidInputError(f"Non-finite point forecast {y_hat}")
    if q < 0:
        return None
    return (y_hat - q, y_hat + q)


def intervals_from_ladder(y_hat: float, q: np.ndarray) -> np.ndarray:
    """Vectorized ``interval_from_quantile``; empty intervals are NaN rows."""
    if not math.isfinite(y_hat):
        raise InvalidInputError(f"Non-finite point forecast {y_hat}")
    q = np.asarray(q, dtype=np.float64)
    out = np.column_stack([y_hat - q, y_hat + q])
    out[q < 0] = np.nan
    return out


def is_consistent(intervals, ladder: AlphaLadder) -> int:
    """1 iff the interval ladder is nested: smaller alpha, wider interval."""
    arr = _as_interval_array(intervals)
    if arr.shape[0] != len(ladder):
        raise InvalidInputError(
            f"Got {arr.shape[0]} intervals for a ladder of {len(ladder)} levels"
        )
    return intervals_nested(arr)


def intervals_nested(arr: np.ndarray) -> int:
    """
    Nesting test on an (n, 2) interval array ordered by decreasing alpha.

    Containment is transitive, so adjacent pairs are enough. Empty (NaN)
    intervals are contained in everything and contain nothing non-empty.
    """
    if arr.shape[0] < 2:
        return 1
    empty = np.isnan(arr[:, 0])
    lo, hi = arr[:, 0], arr[:, 1]
    with np.errstate(invalid='ignore'):
        nested = (lo[:-1] >= lo[1:]) & (hi[:-1] <= hi[1:])
    ok = empty[:-1] | (~empty[1:] & nested)
    return int(np.all(ok))


def _as_interval_array(intervals) -> np.ndarray:
    if isinstance(intervals, np.ndarray):
        return intervals.astype(np.float64).reshape(-1, 2)
    rows = [(np.nan, np.nan) if iv is None else iv for iv in intervals]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def sort_ladder(q, ladder: AlphaLadder) -> np.ndarray:
    """Ascending rearrangement: the largest quantile attaches to the smallest alpha."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (len(ladder),):
        raise InvalidInputError(f"Expected {len(ladder)} quantiles, got shape {q.shape}")
    return np.sort(q)


@dataclass(frozen=True)
class StepRecord:
    """One scored online step."""

    t: int
    y: float
    y_hat: float
    tau: int
    s: float
    errs: np.ndarray
    ladder: QuantileLadder
    intervals: np.ndarray
    tta_iters: int = 0
    tta_complete: bool = True

    @classmethod
    def score(cls, t: int, y: float, y_hat: float, tau: int, ladder: QuantileLadder,
              tta_iters: int = 0, tta_complete: bool = True) -> "StepRecord":
        """Score an observation against the ladder issued for it."""
        s = nonconformity(y, y_hat)
        errs = coverage_errors(s, ladder.q_conf)
        intervals = intervals_from_ladder(y_hat, ladder.q_conf)
        return cls(int(t), float(y), float(y_hat), int(tau), s, _freeze(errs, np.int8),
                   ladder, _freeze(intervals), int(tta_iters), bool(tta_complete))

    @property
    def n(self) -> int:
        return len(self.errs)

    @property
    def consistent(self) -> int:
        return intervals_nested(self.intervals)

    def sorted(self, ladder: AlphaLadder) -> "StepRecord":
        """The same step with its conformalized quantiles rearranged."""
        q = sort_ladder(self.ladder.q_conf, ladder)
        return StepRecord.score(self.t, self.y, self.y_hat, self.tau, QuantileLadder.fixed(q),
                                self.tta_iters, self.tta_complete)


class _Growable:
    """Append-only float64 buffer with amortized doubling."""

    def __init__(self, width: Optional[int] = None, capacity: int = 64):
        shape = (capacity,) if width is None else (capacity, width)
        self._buf = np.empty(shape, dtype=np.float64)
        self._size = 0

    def append(self, value):
        if self._size == self._buf.shape[0]:
            new = np.empty((2 * self._buf.shape[0],) + self._buf.shape[1:], dtype=np.float64)
            new[:self._size] = self._buf[:self._size]
            self._buf = new
        self._buf[self._size] = value
        self._size += 1

    def view(self) -> np.ndarray:
        out = self._buf[:self._size]
        out = out.view()
        out.setflags(write=False)
        return out


class History:
    """Time-ordered, append-only StepRecord store with array views of the signals."""

    def __init__(self, n: int):
        self.n = int(n)
        self.records: List[StepRecord] = []
        self._t = _Growable()
        self._s = _Growable()
        self._y = _Growable()
        self._errs = _Growable(self.n)
        self._q = _Growable(self.n)

    def append(self, record: StepRecord):
        if record.n != self.n:
            raise InvalidInputError(f"Record has {record.n} levels, history expects {self.n}")
        if self.records and record.t <= self.records[-1].t:
            raise PipelineOrderError(
                f"History is append-only in time: t={record.t} after t={self.records[-1].t}"
            )
        self.records.append(record)
        self._t.append(record.t)
        self._s.append(record.s)
        self._y.append(record.y)
        self._errs.append(record.errs)
        self._q.append(record.ladder.q_conf)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[StepRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def times(self) -> np.ndarray:
        return self._t.view()

    @property
    def scores(self) -> np.ndarray:
        return self._s.view()

    @property
    def targets(self) -> np.ndarray:
        return self._y.view()

    @property
    def errs(self) -> np.ndarray:
        return self._errs.view()

    @property
    def quantiles(self) -> np.ndarray:
        return self._q.view()

    def available(self, T: int) -> int:
        """Number of records whose target time is <= T."""
        return int(np.searchsorted(self.times, T, side='right'))

    def running_errors(self, w: int, T: Optional[int] = None) -> np.ndarray:
        """Per-alpha running error using records observed through time T."""
        count = len(self) if T is None else self.available(T)
        errs = self.errs[max(0, count - w):count]
        n_pad = w - errs.shape[0]
        return (errs.sum(axis=0) + n_pad * PAD_ERR) / w
