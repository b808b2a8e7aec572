"""
Base point forecasters whose residuals feed the conformal layer.

Every forecaster sees only the history handed to ``predict``; the online
loop hands it ``y[:t + 1]`` when issuing the forecast for ``t + tau``, so
leakage is impossible by construction.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import lfilter
from sklearn.linear_model import LinearRegression, Ridge

from . import autodiff as ad
from .autodiff import ParamStore
from .errors import (
    InsufficientDataError,
    InvalidParameterError,
    PipelineOrderError,
    SchemaError,
)
from .neural import dense, gru_encode, init_dense, init_gru

logger = logging.getLogger(__name__)

THETA_ALPHA_GRID = tuple(np.round(np.arange(0.1, 1.0, 0.1), 1))
EXTERNAL_COLUMNS = ['t', 'tau', 'y_hat']


def _check_tau(tau: int):
    if int(tau) != tau or tau < 1:
        raise InvalidParameterError(f"Forecast horizon must be an integer >= 1, got {tau}")


# --- AR(p) -------------------------------------------------------------------

@dataclass(frozen=True)
class ARModel:
    """AR(p) coefficients; ``coef[k]`` multiplies y_{t-1-k}."""

    coef: np.ndarray
    intercept: float

    @property
    def p(self) -> int:
        return len(self.coef)


def _lag_matrix(y: np.ndarray, p: int) -> Tuple[np.ndarray, np.ndarray]:
    windows = np.lib.stride_tricks.sliding_window_view(y[:-1], p)    # rows y[i..i+p-1]
    X = windows[:, ::-1]                                             # most recent lag first
    return X, y[p:]


def fit_ar(y, p: int, ridge: float = 0.0) -> ARModel:
    """
    Least-squares AR(p) with intercept on one-step residuals.

    Args:
        y: training series
        p: lag order
        ridge: L2 penalty; 0 gives ordinary least squares (minimum-norm on
            rank-deficient designs)
    """
    y = np.asarray(y, dtype=np.float64)
    if p < 1:
        raise InvalidParameterError(f"AR order must be >= 1, got {p}")
    if ridge < 0:
        raise InvalidParameterError(f"Ridge penalty must be >= 0, got {ridge}")
    if len(y) <= p + 1:
        raise InsufficientDataError(f"AR({p}) needs more than {p + 1} points, got {len(y)}")
    X, target = _lag_matrix(y, p)
    model = Ridge(alpha=ridge) if ridge > 0 else LinearRegression()
    model.fit(X, target)
    return ARModel(coef=np.asarray(model.coef_, dtype=np.float64).copy(),
                   intercept=float(model.intercept_))


def predict_ar(model: ARModel, history, tau: int) -> float:
    """Iterated multi-step forecast, feeding predictions back as lags."""
    _check_tau(tau)
    history = np.asarray(history, dtype=np.float64)
    if len(history) < model.p:
        raise InsufficientDataError(f"AR({model.p}) needs {model.p} history points, got {len(history)}")
    lags = list(history[-model.p:][::-1])
    value = float('nan')
    for _ in range(int(tau)):
        value = model.intercept + float(np.dot(model.coef, lags))
        lags = [value] + lags[:-1]
    return value


# --- Theta -------------------------------------------------------------------

def _ses(y: np.ndarray, alpha: float) -> Tuple[np.ndarray, float]:
    """One-step SES forecasts and final level, level initialised at y[0]."""
    levels = lfilter([alpha], [1.0, alpha - 1.0], y[1:], zi=[(1.0 - alpha) * y[0]])[0]
    forecasts = np.concatenate([[y[0]], levels[:-1]])
    return forecasts, float(levels[-1])


def theta_forecast(y, tau: int, alphas: Sequence[float] = THETA_ALPHA_GRID) -> float:
    """
    Classical Theta method with theta = 2.

    Averages the extrapolated linear trend (the theta = 0 line) with simple
    exponential smoothing of the theta = 2 line. The smoothing parameter is
    the grid value with the smallest one-step squared error.
    """
    _check_tau(tau)
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 3:
        raise InsufficientDataError(f"Theta needs at least 3 points, got {len(y)}")
    t = np.arange(len(y), dtype=np.float64)
    slope, intercept = np.polyfit(t, y, 1)
    theta_line = 2.0 * y - (intercept + slope * t)
    best = None
    for alpha in alphas:
        fitted, level = _ses(theta_line, alpha)
        sse = float(np.sum((theta_line[1:] - fitted[1:]) ** 2))
        if best is None or sse < best[0]:
            best = (sse, level)
    trend = intercept + slope * (len(y) - 1 + tau)
    return 0.5 * (trend + best[1])


# --- forecaster objects --------------------------------------------------------

class BaseForecaster(ABC):
    """Fit once on the training segment, then forecast from any history prefix."""

    name = 'base'

    @abstractmethod
    def fit(self, y) -> "BaseForecaster":
        ...

    @abstractmethod
    def predict(self, history, tau: int) -> float:
        ...

    @property
    def min_history(self) -> int:
        return 1


class ARForecaster(BaseForecaster):
    name = 'ar'

    def __init__(self, p: int = 3, ridge: float = 1e-3):
        self.p = p
        self.ridge = ridge
        self.model: Optional[ARModel] = None

    def fit(self, y) -> "ARForecaster":
        self.model = fit_ar(y, self.p, self.ridge)
        logger.debug(f"AR({self.p}) coefficients {self.model.coef}, intercept {self.model.intercept:.4f}")
        return self

    def predict(self, history, tau: int) -> float:
        if self.model is None:
            raise PipelineOrderError("AR forecaster used before fit")
        return predict_ar(self.model, history, tau)

    @property
    def min_history(self) -> int:
        return self.p


class ThetaForecaster(BaseForecaster):
    """Theta on a trailing window (the full history when window is None)."""

    name = 'theta'

    def __init__(self, window: Optional[int] = 200):
        self.window = window

    def fit(self, y) -> "ThetaForecaster":
        return self

    def predict(self, history, tau: int) -> float:
        history = np.asarray(history, dtype=np.float64)
        if self.window:
            history = history[-self.window:]
        return theta_forecast(history, tau)

    @property
    def min_history(self) -> int:
        return 3


class GruForecaster(BaseForecaster):
    """
    Small GRU seq2seq forecaster: a GRU over the last ``window`` normalized
    values and a linear head emitting one value per horizon in ``horizons``.
    """

    name = 'gru'

    def __init__(self, horizons: Iterable[int] = (1,), hidden: int = 16, window: int = 16,
                 epochs: int = 50, lr: float = 1e-2, seed: int = 0):
        self.horizons = tuple(sorted(int(h) for h in horizons))
        for h in self.horizons:
            _check_tau(h)
        self.hidden = hidden
        self.window = window
        self.epochs = epochs
        self.lr = lr
        self.seed = seed
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        init_gru(self.params, 'gru', 1, hidden, rng)
        init_dense(self.params, 'out', hidden, len(self.horizons), rng)
        self.mean = 0.0
        self.std = 1.0
        self.fitted = False

    def _windows(self, z: np.ndarray) -> np.ndarray:
        padded = np.concatenate([np.zeros(self.window), z])
        return np.lib.stride_tricks.sliding_window_view(padded, self.window)[1:]

    def fit(self, y) -> "GruForecaster":
        y = np.asarray(y, dtype=np.float64)
        H = max(self.horizons)
        if len(y) <= H + 1:
            raise InsufficientDataError(f"GRU forecaster needs more than {H + 1} points, got {len(y)}")
        self.mean = float(y.mean())
        self.std = float(y.std()) or 1.0
        z = (y - self.mean) / self.std
        inputs = self._windows(z)[:len(z) - H]                      # window ending at t
        targets = np.column_stack([z[h:len(z) - H + h] for h in self.horizons])
        x = inputs[:, :, None]
        for epoch in range(self.epochs):
            pred = dense(gru_encode(x, self.params, 'gru'), self.params, 'out')
            loss = ad.mean(ad.square(pred - targets))
            ad.backward(loss)
            ad.adam_step(self.params, lr=self.lr)
            if epoch == 0 or epoch == self.epochs - 1:
                logger.debug(f"GRU forecaster epoch {epoch}: mse {loss.item():.5f}")
        self.fitted = True
        return self

    def predict(self, history, tau: int) -> float:
        _check_tau(tau)
        if not self.fitted:
            raise PipelineOrderError("GRU forecaster used before fit")
        if tau not in self.horizons:
            raise InvalidParameterError(f"GRU forecaster was trained for horizons {self.horizons}, not {tau}")
        z = (np.asarray(history, dtype=np.float64) - self.mean) / self.std
        x = self._windows(z)[-1][None, :, None]
        with ad.no_grad():
            pred = dense(gru_encode(x, self.params, 'gru'), self.params, 'out')
        return float(pred.values[0, self.horizons.index(tau)] * self.std + self.mean)


# --- bundles -------------------------------------------------------------------

@dataclass
class ForecastBundle:
    """Point forecasts keyed by (issue time t, horizon tau)."""

    model: str
    horizons: Tuple[int, ...]
    forecasts: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def get(self, t: int, tau: int) -> float:
        try:
            return self.forecasts[(int(t), int(tau))]
        except KeyError:
            raise PipelineOrderError(f"No base forecast issued at t={t} for tau={tau}") from None

    def __contains__(self, key) -> bool:
        return key in self.forecasts

    def __len__(self) -> int:
        return len(self.forecasts)

    def issue_times(self, tau: int) -> np.ndarray:
        return np.array(sorted(t for (t, h) in self.forecasts if h == tau), dtype=np.int64)


def build_bundle(forecaster: BaseForecaster, y, horizons: Iterable[int], start: int = 0) -> ForecastBundle:
    """
    Issue forecasts at every t >= start whose target t + tau is in range,
    each from the prefix ``y[:t + 1]``.
    """
    y = np.asarray(y, dtype=np.float64)
    horizons = tuple(sorted(int(h) for h in horizons))
    bundle = ForecastBundle(model=forecaster.name, horizons=horizons)
    first = max(start, forecaster.min_history - 1)
    for t in range(first, len(y)):
        prefix = y[:t + 1]
        for tau in horizons:
            if t + tau < len(y):
                bundle.forecasts[(t, tau)] = forecaster.predict(prefix, tau)
    logger.debug(f"Issued {len(bundle)} {forecaster.name} forecasts from t={first}")
    return bundle


def load_external(path, horizons: Optional[Iterable[int]] = None) -> ForecastBundle:
    """
    Load upstream predictions from a ``t,tau,y_hat`` CSV.

    Every issue time must carry every horizon, (t, tau) pairs must be
    unique, and rows of one horizon must appear in increasing t.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemaError(f"{path}: cannot read predictions: {e}") from e
    if list(df.columns) != EXTERNAL_COLUMNS:
        raise SchemaError(f"{path}: expected header {','.join(EXTERNAL_COLUMNS)}, got {','.join(map(str, df.columns))}")

    for col, kind in (('t', 'integer'), ('tau', 'integer'), ('y_hat', 'float')):
        values = pd.to_numeric(df[col], errors='coerce')
        bad = values.isna() | ~np.isfinite(values.astype(float))
        if kind == 'integer':
            bad |= values.notna() & (values != values.round())
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise SchemaError(f"{path}: row {row + 2}, column {col}: expected {kind}, got {df[col].iloc[row]!r}")
        df[col] = values.astype(np.int64 if kind == 'integer' else np.float64)

    if (df['tau'] < 1).any() or (df['t'] < 0).any():
        row = int(np.flatnonzero(((df['tau'] < 1) | (df['t'] < 0)).to_numpy())[0])
        raise SchemaError(f"{path}: row {row + 2}: t must be >= 0 and tau >= 1")
    dup = df.duplicated(['t', 'tau'])
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise SchemaError(f"{path}: row {row + 2}: duplicate forecast for (t={df['t'].iloc[row]}, tau={df['tau'].iloc[row]})")
    for tau, group in df.groupby('tau', sort=True):
        if not group['t'].is_monotonic_increasing:
            raise SchemaError(f"{path}: forecasts for tau={tau} are not in increasing issue-time order")

    wanted = tuple(sorted(set(horizons))) if horizons is not None else tuple(sorted(df['tau'].unique()))
    present = set(zip(df['t'], df['tau']))
    for t in sorted(df['t'].unique()):
        for tau in wanted:
            if (t, tau) not in present:
                raise SchemaError(f"{path}: missing horizon tau={tau} for issue time t={t}")

    bundle = ForecastBundle(model=f'external:{path.name}', horizons=tuple(int(h) for h in wanted))
    for t, tau, y_hat in df.itertuples(index=False):
        bundle.forecasts[(int(t), int(tau))] = float(y_hat)
    logger.info(f"Loaded {len(bundle)} external forecasts from {path}")
    return bundle


def make_forecaster(name: str, params: Optional[dict] = None,
                    horizons: Iterable[int] = (1,), seed: int = 0) -> BaseForecaster:
    """Instantiate a forecaster by its config name."""
    params = dict(params or {})
    if name == 'ar':
        return ARForecaster(**params)
    if name == 'theta':
        return ThetaForecaster(**params)
    if name == 'gru':
        return GruForecaster(horizons=horizons, seed=seed, **params)
    raise InvalidParameterError(f"Unknown forecaster '{name}' (choose ar, theta, gru or external)")


def as_forecast_fn(source, y):
    """
    Adapt a ForecastBundle, a fitted forecaster or a callable to the
    ``(t, tau) -> y_hat`` form the online loop consumes.
    """
    if isinstance(source, ForecastBundle):
        return source.get
    if isinstance(source, BaseForecaster):
        y = np.asarray(y, dtype=np.float64)
        return lambda t, tau: source.predict(y[:t + 1], tau)
    if callable(source):
        return source
    raise InvalidParameterError(f"Cannot use {type(source).__name__} as a forecast source")
