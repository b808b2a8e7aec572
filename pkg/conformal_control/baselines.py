"""
Comparison controllers: split conformal (CF-RNN conformal layer), NEXCP
weighted quantiles, ACI and C-PID (quantile tracker + error integrator).

The quantile functions are pure; the controller classes wrap them in the
shared online interface.
"""

import logging
import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .controller import ConformalController
from .core import AlphaLadder, QuantileLadder, StepRecord
from .errors import InsufficientDataError, InvalidInputError, InvalidParameterError

logger = logging.getLogger(__name__)

INF = float('inf')
SATURATION_LIMIT = math.pi / 2 - 1e-3


def split_cp_quantile(scores, alpha: float) -> float:
    """The ceil((n+1)(1-alpha))-th smallest score, or +inf when that exceeds n."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    if n == 0:
        raise InsufficientDataError("Split-CP quantile needs a non-empty calibration buffer")
    if alpha <= 0:
        return INF
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-12)
    if k > n:
        return INF
    if k <= 0:
        return -INF
    return float(np.partition(scores, k - 1)[k - 1])


def cfrnn_ladder(scores_per_horizon: Dict[int, Sequence[float]], ladder: AlphaLadder,
                 H: Optional[int] = None, bonferroni: bool = False) -> Dict[int, QuantileLadder]:
    """Per-horizon split-CP ladders, optionally at alpha / H."""
    H = len(scores_per_horizon) if H is None else H
    if H < 1:
        raise InvalidParameterError(f"Number of horizons must be >= 1, got {H}")
    scale = 1.0 / H if bonferroni else 1.0
    return {
        tau: QuantileLadder.fixed([split_cp_quantile(scores, a * scale) for a in ladder])
        for tau, scores in scores_per_horizon.items()
    }


def nexcp_quantile(scores, rho: float, alpha: float) -> float:
    """
    Weighted (1 - alpha) quantile over scores 1..T with weight rho^(T-i) on
    score i (the newest score weighs 1) and a point mass of 1 at +inf.
    """
    if not 0.0 < rho <= 1.0:
        raise InvalidParameterError(f"NEXCP decay rho must be in (0, 1], got {rho}")
    scores = np.asarray(scores, dtype=np.float64)
    T = scores.size
    if T == 0:
        raise InsufficientDataError("NEXCP quantile needs a non-empty calibration buffer")
    weights = rho ** (T - np.arange(1, T + 1, dtype=np.float64))
    total = weights.sum() + 1.0
    order = np.argsort(scores, kind='stable')
    sorted_scores = scores[order]
    cumulative = np.cumsum(weights[order]) / total
    # ties: the cumulative weight at s includes every score equal to s
    last_of_tie = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    target = 1.0 - alpha
    hits = np.flatnonzero(last_of_tie & (cumulative >= target - 1e-12))
    if hits.size == 0:
        return INF
    return float(sorted_scores[hits[0]])


def aci_step(alpha_t: float, err: int, eta: float, alpha_target: float) -> float:
    """alpha_{t+1} = alpha_t + eta * (alpha - err)."""
    if not eta > 0:
        raise InvalidParameterError(f"ACI step size must be positive, got {eta}")
    return alpha_t + eta * (alpha_target - err)


def saturation(x: float, t: int, K_I: float, C: float = 1.0) -> float:
    """Integrator term K_I * tan(clip(x log(t+1) / ((t+1) C), +-(pi/2 - 1e-3)))."""
    if K_I == 0:
        return 0.0
    arg = x * math.log(t + 1) / ((t + 1) * C)
    return K_I * math.tan(min(max(arg, -SATURATION_LIMIT), SATURATION_LIMIT))


def cpid_step(q_t: float, err: int, eta: float, alpha: float, integrator_sum: float,
              K_I: float, t: int, C: float = 1.0) -> float:
    """q_{t+1} = q_t + eta (err - alpha) + r(sum of (err_i - alpha))."""
    if not eta > 0:
        raise InvalidParameterError(f"C-PID step size must be positive, got {eta}")
    return q_t + eta * (err - alpha) + saturation(integrator_sum, t, K_I, C)


def aci_crossing_witness(alpha1_t: float, alpha2_t: float, eta: float,
                         alpha1: float, alpha2: float) -> int:
    """
    1 iff one ACI step in which the alpha1 interval covers and the alpha2
    interval misses leaves alpha1_{t+1} > alpha2_{t+1}.
    """
    if not alpha1 < alpha2:
        raise InvalidInputError(f"Crossing witness needs alpha1 < alpha2, got {alpha1} >= {alpha2}")
    return int(eta * (alpha1 - alpha2 + 1.0) > alpha2_t - alpha1_t)


# --- controllers ---------------------------------------------------------------

class SplitConformalController(ConformalController):
    """
    Split conformal on the scores observed so far, per horizon.

    With ``bonferroni`` each of the ``n_horizons`` controllers uses alpha / H.
    """

    method = 'splitcp'

    def __init__(self, ladder: AlphaLadder, tau: int = 1, n_horizons: int = 1,
                 bonferroni: bool = False, window: Optional[int] = None):
        super().__init__(ladder, tau)
        self.n_horizons = n_horizons
        self.bonferroni = bonferroni
        self.window = window

    def buffer(self) -> np.ndarray:
        scores = self.history.scores
        return scores[-self.window:] if self.window else scores

    def _issue(self, t: int) -> Tuple[QuantileLadder, int, bool]:
        buffer = self.buffer()
        if buffer.size == 0:
            return QuantileLadder.fixed(np.full(self.n, INF)), 0, True
        H = self.n_horizons if self.bonferroni else 1
        return cfrnn_ladder({self.tau: buffer}, self.ladder, H, self.bonferroni)[self.tau], 0, True


class NexcpController(ConformalController):
    method = 'nexcp'

    def __init__(self, ladder: AlphaLadder, tau: int = 1, rho: float = 0.99):
        super().__init__(ladder, tau)
        if not 0.0 < rho <= 1.0:
            raise InvalidParameterError(f"NEXCP decay rho must be in (0, 1], got {rho}")
        self.rho = rho

    def _issue(self, t: int) -> Tuple[QuantileLadder, int, bool]:
        scores = self.history.scores
        if scores.size == 0:
            return QuantileLadder.fixed(np.full(self.n, INF)), 0, True
        return QuantileLadder.fixed([nexcp_quantile(scores, self.rho, a) for a in self.ladder]), 0, True


class AciController(ConformalController):
    """
    Adaptive conformal inference, one independent rate per alpha.

    Rates are stored unclamped and clamped into [1/(n+1), 1] only for the
    quantile lookup; a rate <= 0 yields the infinite interval.
    """

    method = 'aci'

    def __init__(self, ladder: AlphaLadder, tau: int = 1, eta: float = 0.05):
        super().__init__(ladder, tau)
        if not eta > 0:
            raise InvalidParameterError(f"ACI step size must be positive, got {eta}")
        self.eta = eta
        self.alpha_t = ladder.as_array().copy()

    def _update(self, record: StepRecord):
        for i, alpha in enumerate(self.ladder):
            self.alpha_t[i] = aci_step(self.alpha_t[i], int(record.errs[i]), self.eta, alpha)

    def lookup(self, alpha_t: float, scores: np.ndarray) -> float:
        if alpha_t <= 0 or scores.size == 0:
            return INF
        clamped = min(max(alpha_t, 1.0 / (scores.size + 1)), 1.0)
        return split_cp_quantile(scores, clamped)

    def _issue(self, t: int) -> Tuple[QuantileLadder, int, bool]:
        scores = self.history.scores
        return QuantileLadder.fixed([self.lookup(a, scores) for a in self.alpha_t]), 0, True


class CpidController(ConformalController):
    """
    Quantile tracker plus saturated error integrator per alpha.

    The tracked quantile accumulates only the proportional steps; the
    integrator term is added on top when a ladder is issued.
    """

    method = 'cpid'

    def __init__(self, ladder: AlphaLadder, tau: int = 1, eta: float = 0.1,
                 K_I: float = 1.0, C: float = 1.0):
        super().__init__(ladder, tau)
        if not eta > 0:
            raise InvalidParameterError(f"C-PID step size must be positive, got {eta}")
        self.eta = eta
        self.K_I = K_I
        self.C = C
        self.tracked = np.zeros(ladder.n)
        self.integrator = np.zeros(ladder.n)
        self.q = np.zeros(ladder.n)
        self.steps = 0

    def _update(self, record: StepRecord):
        self.steps += 1
        for i, alpha in enumerate(self.ladder):
            err = int(record.errs[i])
            self.integrator[i] += err - alpha
            self.q[i] = cpid_step(self.tracked[i], err, self.eta, alpha, self.integrator[i],
                                  self.K_I, self.steps, self.C)
            self.tracked[i] += self.eta * (err - alpha)

    def _issue(self, t: int) -> Tuple[QuantileLadder, int, bool]:
        return QuantileLadder.fixed(self.q.copy()), 0, True
