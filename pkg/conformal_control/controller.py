"""
Shared online interface for conformal controllers.

At each time T a controller observes y_T, scores the ladder it issued for
T (if any), updates its state, and issues a ladder for T + tau from the
base forecast. Subclasses implement ``_issue`` and optionally ``_update``.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import AlphaLadder, History, QuantileLadder, StepRecord
from .errors import InvalidInputError, InvalidParameterError, PipelineOrderError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Issuance:
    """A ladder waiting for its target to arrive."""

    issued_at: int
    y_hat: float
    ladder: QuantileLadder
    tta_iters: int = 0
    tta_complete: bool = True


@dataclass
class SeriesInput:
    """Target series plus named sequence views, all indexed by time from 0."""

    y: np.ndarray
    views: Dict[str, np.ndarray]
    region: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.views = {k: np.asarray(v, dtype=np.float64) for k, v in (self.views or {}).items()}
        for name, v in self.views.items():
            if len(v) != len(self.y):
                raise InvalidInputError(f"View '{name}' has {len(v)} points, series has {len(self.y)}")

    def __len__(self) -> int:
        return len(self.y)

    def truncate(self, length: int) -> "SeriesInput":
        return SeriesInput(self.y[:length], {k: v[:length] for k, v in self.views.items()}, self.region)


class ConformalController(ABC):
    """Base class for every online interval controller."""

    method = 'base'

    def __init__(self, ladder: AlphaLadder, tau: int = 1):
        if int(tau) != tau or tau < 1:
            raise InvalidParameterError(f"Horizon tau must be an integer >= 1, got {tau}")
        self.ladder = ladder
        self.tau = int(tau)
        self.history = History(ladder.n)
        self.observed: List[float] = []
        self.observed_views: Dict[str, List[float]] = {}
        self._pending: Dict[int, Issuance] = {}

    @property
    def n(self) -> int:
        return self.ladder.n

    @property
    def time(self) -> int:
        """Index of the next observation."""
        return len(self.observed)

    def prime(self, series: SeriesInput):
        """Record pre-history observations that are never scored."""
        if self.observed:
            raise PipelineOrderError("prime() must be called before the first observation")
        self.observed.extend(float(v) for v in series.y)
        for name, values in series.views.items():
            self.observed_views[name] = [float(v) for v in values]

    def observe(self, t: int, y: float, views: Optional[Dict[str, float]] = None) -> Optional[StepRecord]:
        """Record y_t and score the ladder issued for t, if one is pending."""
        if t != self.time:
            raise PipelineOrderError(f"{self.method}: expected observation for t={self.time}, got t={t}")
        if not math.isfinite(y):
            raise InvalidInputError(f"{self.method}: non-finite observation y={y} at t={t}")
        self.observed.append(float(y))
        for name, value in (views or {}).items():
            self.observed_views.setdefault(name, []).append(float(value))
        issuance = self._pending.pop(t, None)
        if issuance is None:
            return None
        record = StepRecord.score(t, y, issuance.y_hat, self.tau, issuance.ladder,
                                  issuance.tta_iters, issuance.tta_complete)
        self.history.append(record)
        self._update(record)
        return record

    def issue(self, t: int, y_hat: Optional[float]) -> QuantileLadder:
        """Issue the ladder for t + tau around the base forecast y_hat."""
        if t != self.time - 1:
            raise PipelineOrderError(f"{self.method}: issue at t={t} but last observation is t={self.time - 1}")
        if y_hat is None or not math.isfinite(y_hat):
            raise PipelineOrderError(f"{self.method}: missing base forecast for t={t}, tau={self.tau}")
        ladder, iters, complete = self._issue(t)
        self._pending[t + self.tau] = Issuance(t, float(y_hat), ladder, iters, complete)
        return ladder

    def step(self, t: int, y: float, y_hat_next: Optional[float],
             views: Optional[Dict[str, float]] = None) -> Tuple[Optional[StepRecord], QuantileLadder]:
        record = self.observe(t, y, views)
        return record, self.issue(t, y_hat_next)

    def before_issue(self, t: int, warmup: int):
        """Hook run after observing t and before issuing from t."""

    @abstractmethod
    def _issue(self, t: int) -> Tuple[QuantileLadder, int, bool]:
        ...

    def _update(self, record: StepRecord):
        pass


def run_online(controller: ConformalController, series: SeriesInput, forecast,
               start: int, warmup: int, sink: Optional[List[StepRecord]] = None) -> List[StepRecord]:
    """
    Drive a controller through a series in time order.

    Observations before ``start`` prime the controller. Ladders are issued
    from every T >= start; records for ladders issued before ``warmup``
    form the burn-in and are not returned, so the emitted stream has
    ``len(series) - warmup - tau`` records.

    Args:
        controller: a fresh controller
        series: target series and views
        forecast: callable (t, tau) -> point forecast
        start: first issue time
        warmup: first emitted issue time
        sink: list the emitted records are appended to as they arrive, so a
            caller keeps the partial stream if a later step raises
    """
    if not 0 <= start <= warmup:
        raise InvalidParameterError(f"Need 0 <= start ({start}) <= warmup ({warmup})")
    if len(series) <= warmup:
        raise InvalidParameterError(f"Series of length {len(series)} is not longer than warmup {warmup}")
    tau = controller.tau
    controller.prime(series.truncate(start))
    emitted: List[StepRecord] = [] if sink is None else sink
    for T in range(start, len(series)):
        views = {name: float(values[T]) for name, values in series.views.items()}
        record = controller.observe(T, float(series.y[T]), views)
        if record is not None and record.t - tau >= warmup:
            emitted.append(record)
        if T + tau < len(series):
            controller.before_issue(T, warmup)
            controller.issue(T, forecast(T, tau))
    logger.debug(f"{controller.method} tau={tau}: {len(emitted)} records after warmup {warmup}")
    return emitted
