"""
Neural conformal controller.

A quantile predictor proposes a monotone raw ladder q_raw from the recent
conformal signals and data views. Each issuance then

  1. conformalizes: delta += eta * (running_err - alpha), q = q_raw + delta
  2. optionally repairs crossings at test time: an auxiliary map from the
     combined embedding to h is fitted to minimise the monotonicity loss
     of q_raw + h + delta, without touching the predictor.

Summing step 1 over time gives delta_{T+1} = eta * sum(running_err - alpha),
which bounds the long-run miscoverage gap by |delta| / (eta T).

The predictor is trained in normalized score units (scores divided by
the warmup score scale); conformalization and issued ladders are in
score units.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .checkpoint import CheckpointCodec
from .controller import ConformalController, Issuance, SeriesInput, run_online
from .core import (
    PAD_ERR,
    PAD_PREDICTION,
    AlphaLadder,
    QuantileLadder,
    StepRecord,
    intervals_from_ladder,
    intervals_nested,
    running_error_path,
)
from .errors import (
    InsufficientDataError,
    InvalidInputError,
    InvalidParameterError,
    SchemaError,
)
from .forecasters import as_forecast_fn
from .neural import (
    SEQUENCE,
    STATIC,
    EncoderConfig,
    PredictorInputs,
    QuantilePredictor,
    ViewSpec,
    predictor_forward,
)

logger = logging.getLogger(__name__)

SOFT_EPS = 1e-7
LOSS_NAMES = ('quantile', 'coverage', 'efficiency', 'monotonicity')


# --- configuration and state ------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    quantile: float = 1.0
    coverage: float = 1.0
    efficiency: float = 0.1
    monotonicity: float = 1.0

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def stage(self, k: int) -> "LossWeights":
        """Weights used in training stage k (1, 2 or 3)."""
        if k == 1:
            return LossWeights(self.quantile, 0.0, 0.0, 0.0)
        if k == 2:
            return LossWeights(self.quantile, self.coverage, self.efficiency, 0.0)
        if k == 3:
            return self
        raise InvalidParameterError(f"Training stages are 1, 2 and 3, got {k}")


@dataclass(frozen=True)
class TtaConfig:
    """Test-time adaptation settings; step_size is in score units."""

    enabled: bool = True
    max_iters: int = 50
    step_size: float = 0.01
    dcs_threshold: float = 1.0
    mode: str = 'mlp'

    def __post_init__(self):
        if self.max_iters < 0:
            raise InvalidParameterError(f"TTA max_iters must be >= 0, got {self.max_iters}")
        if not self.step_size > 0:
            raise InvalidParameterError(f"TTA step size must be positive, got {self.step_size}")
        if self.mode not in ('mlp', 'vector'):
            raise InvalidParameterError(f"TTA mode must be 'mlp' or 'vector', got {self.mode!r}")


@dataclass
class NccState:
    """
    Conformalization state and hyperparameters of one NCC controller.

    eta and K are in score units; ``score_scale`` converts to the
    normalized units the predictor is trained in.
    """

    ladder: AlphaLadder
    eta: float
    w: int = 10
    K: float = 0.05
    score_scale: float = 1.0
    lambdas: LossWeights = field(default_factory=LossWeights)
    retrain_interval: Optional[int] = 5
    stages: Tuple[int, int, int] = (100, 50, 50)
    retrain_stages: Tuple[int, int, int] = (10, 5, 5)
    tta: TtaConfig = field(default_factory=TtaConfig)
    lr: float = 1e-2
    max_train_windows: int = 512
    delta: Optional[np.ndarray] = None
    steps: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise InvalidParameterError(f"Conformalization rate eta must be positive, got {self.eta}")
        if self.w < 1:
            raise InvalidParameterError(f"Running-error window must be >= 1, got {self.w}")
        if not self.K > 0:
            raise InvalidParameterError(f"Sigmoid temperature K must be positive, got {self.K}")
        if not self.score_scale > 0:
            raise InvalidParameterError(f"Score scale must be positive, got {self.score_scale}")
        if self.delta is None:
            self.delta = np.zeros(self.ladder.n)
        self.delta = np.array(self.delta, dtype=np.float64)
        if self.delta.shape != (self.ladder.n,):
            raise InvalidParameterError(f"delta must have length {self.ladder.n}, got {self.delta.shape}")

    @classmethod
    def scaled(cls, ladder: AlphaLadder, score_scale: float, eta_scale: float = 0.1,
               k_scale: float = 0.05, tta_step_scale: float = 0.01,
               tta: Optional[TtaConfig] = None, **kwargs) -> "NccState":
        """State with eta, K and the TTA step expressed as multiples of the score scale."""
        tta = tta or TtaConfig()
        tta = TtaConfig(tta.enabled, tta.max_iters, tta_step_scale * score_scale,
                        tta.dcs_threshold, tta.mode)
        return cls(ladder=ladder, eta=eta_scale * score_scale, K=k_scale * score_scale,
                   score_scale=score_scale, tta=tta, **kwargs)


# --- losses -----------------------------------------------------------------

def _reduce(per_alpha: Tensor) -> Tensor:
    """Sum over the ladder axis, mean over any batch axes."""
    total = ad.sum_(per_alpha, axis=-1) if per_alpha.ndim >= 1 else per_alpha
    return ad.mean(total) if total.ndim >= 1 else total


def quantile_loss(s, q, ladder: AlphaLadder) -> Tensor:
    """Pinball loss of the quantiles q at levels 1 - alpha, summed over alpha."""
    s, q = ad._lift(s), ad._lift(q)
    if q.shape[-1] != len(ladder):
        raise InvalidInputError(f"{q.shape[-1]} quantiles for a ladder of {len(ladder)}")
    alphas = ladder.as_array()
    u = s - q
    return _reduce(ad.maximum(u * (1.0 - alphas), u * (-alphas)))


def cov_indicator(running_err, alpha):
    """1 when the running error exceeds alpha (the next interval must cover), else 0."""
    running_err = np.asarray(running_err, dtype=np.float64)
    if np.any((running_err < 0) | (running_err > 1)):
        raise InvalidInputError(f"Running error outside [0, 1]: {running_err}")
    out = (running_err > np.asarray(alpha, dtype=np.float64)).astype(np.int8)
    return int(out) if out.ndim == 0 else out


def soft_coverage_error(s, q, K: float) -> Tensor:
    """Differentiable sigmoid((s - q) / K)."""
    if not K > 0:
        raise InvalidParameterError(f"Sigmoid temperature K must be positive, got {K}")
    return ad.sigmoid((ad._lift(s) - ad._lift(q)) * (1.0 / K))


def coverage_loss(soft_err, cov) -> Tensor:
    """Log loss of the soft error against the label 1 - cov."""
    soft = ad.clip(ad._lift(soft_err), SOFT_EPS, 1.0 - SOFT_EPS)
    cov = np.asarray(cov, dtype=np.float64)
    per = ad.log(soft) * (cov - 1.0) - ad.log(1.0 - soft) * cov
    return _reduce(per)


def efficiency_loss(s, q, soft_err, ladder: Optional[AlphaLadder] = None) -> Tensor:
    """Squared width excess (s - q)^2 weighted by the soft coverage 1 - soft_err."""
    s, q = ad._lift(s), ad._lift(q)
    if ladder is not None and q.shape[-1] != len(ladder):
        raise InvalidInputError(f"{q.shape[-1]} quantiles for a ladder of {len(ladder)}")
    return _reduce(ad.square(s - q) * (1.0 - ad._lift(soft_err)))


def monotonicity_loss(q, ladder: AlphaLadder) -> Tensor:
    """Finite-difference penalty on quantiles that shrink as alpha decreases."""
    q = ad._lift(q)
    if len(ladder) < 2:
        return Tensor(0.0)
    if q.shape[-1] != len(ladder):
        raise InvalidInputError(f"{q.shape[-1]} quantiles for a ladder of {len(ladder)}")
    inv_gap = 1.0 / np.diff(ladder.as_array())
    diffs = q[..., 1:] - q[..., :-1]
    return _reduce(ad.relu(diffs * inv_gap))


def total_loss(components: Mapping[str, Union[Tensor, float]],
               lambdas: Union[LossWeights, Sequence[float]]) -> Tensor:
    """Weighted sum of the loss components; absent components count as 0."""
    weights = lambdas.as_dict() if isinstance(lambdas, LossWeights) else dict(zip(LOSS_NAMES, lambdas))
    total = Tensor(0.0)
    for name in LOSS_NAMES:
        if name not in components:
            continue
        value = components[name]
        raw = value.values if isinstance(value, Tensor) else np.asarray(value)
        if not np.all(np.isfinite(raw)):
            raise InvalidInputError(f"Loss component '{name}' is not finite")
        if weights.get(name, 0.0) != 0.0:
            total = total + ad._lift(value) * weights[name]
    return total


def loss_components(s, q, ladder: AlphaLadder, cov, K: float) -> Dict[str, Tensor]:
    soft = soft_coverage_error(s, q, K)
    return {
        'quantile': quantile_loss(s, q, ladder),
        'coverage': coverage_loss(soft, cov),
        'efficiency': efficiency_loss(s, q, soft, ladder),
        'monotonicity': monotonicity_loss(q, ladder),
    }


# --- conformalization and test-time adaptation ------------------------------

def conformalize(q_raw, state: NccState, running_errs) -> QuantileLadder:
    """Advance delta by eta * (running_err - alpha) and emit q_raw + delta."""
    q_raw = np.asarray(q_raw, dtype=np.float64)
    running_errs = np.asarray(running_errs, dtype=np.float64)
    if q_raw.shape != (state.ladder.n,) or running_errs.shape != (state.ladder.n,):
        raise InvalidInputError(
            f"conformalize: expected {state.ladder.n} values, got {q_raw.shape} and {running_errs.shape}"
        )
    state.delta = state.delta + state.eta * (running_errs - state.ladder.as_array())
    state.steps += 1
    return QuantileLadder.build(q_raw, state.delta)


def ladder_consistent(q) -> int:
    return intervals_nested(intervals_from_ladder(0.0, q))


def tta_adjust(q_raw, delta, embedding, tta: TtaConfig,
               ladder: AlphaLadder) -> Tuple[QuantileLadder, int, bool]:
    """
    Repair a crossed conformalized ladder by fitting an adjustment h.

    Returns the best ladder seen (fewest crossings, then lowest
    monotonicity loss), the number of gradient steps taken, and whether
    the result is fully consistent.
    """
    q_raw = np.asarray(q_raw, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    base = q_raw + delta
    if ladder_consistent(base):
        return QuantileLadder.build(q_raw, delta), 0, True

    params = ParamStore()
    n = len(ladder)
    if tta.mode == 'mlp':
        z = np.asarray(embedding.values if isinstance(embedding, Tensor) else embedding,
                       dtype=np.float64).reshape(1, -1)
        params.add('w', np.zeros((z.shape[1], n)))
        params.add('b', np.zeros(n))

        def adjustment() -> Tensor:
            return ad.reshape(ad.matmul(z, params['w']) + params['b'], (n,))
    else:
        params.add('h', np.zeros(n))

        def adjustment() -> Tensor:
            return params['h']

    def rank(h: np.ndarray) -> Tuple[int, float]:
        q = base + h
        return -ladder_consistent(q), float(monotonicity_loss(q, ladder).item())

    best_h = np.zeros(n)
    best_rank = rank(best_h)
    iters = 0
    for iters in range(1, tta.max_iters + 1):
        loss = monotonicity_loss(adjustment() + base, ladder)
        ad.backward(loss)
        for _, p in params.items():
            if p.grad is not None:
                p.values = p.values - tta.step_size * p.grad
        params.zero_grad()
        with ad.no_grad():
            h = adjustment().values.copy()
        current = rank(h)
        if current < best_rank:
            best_rank, best_h = current, h
        if best_rank[0] == -1:
            break
    complete = best_rank[0] == -1
    if not complete:
        logger.warning(f"TTA left a crossed ladder after {iters} iterations "
                       f"(monotonicity loss {best_rank[1]:.4g})")
    else:
        logger.debug(f"TTA repaired the ladder in {iters} iterations")
    return QuantileLadder.build(q_raw, delta, best_h), iters, complete


# --- training ---------------------------------------------------------------

@dataclass
class TrainingBatch:
    """Training windows in normalized units: targets s, offsets delta, labels cov."""

    inputs: PredictorInputs
    s: np.ndarray
    delta: np.ndarray
    cov: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]

    @staticmethod
    def concat(parts: Sequence["TrainingBatch"]) -> "TrainingBatch":
        return TrainingBatch(PredictorInputs.concat([p.inputs for p in parts]),
                             np.concatenate([p.s for p in parts]),
                             np.concatenate([p.delta for p in parts]),
                             np.concatenate([p.cov for p in parts]))


@dataclass
class TrainingLog:
    stage_losses: Dict[int, List[float]] = field(default_factory=dict)

    def start(self, stage: int) -> float:
        return self.stage_losses[stage][0]

    def end(self, stage: int) -> float:
        return self.stage_losses[stage][-1]


def batch_loss(predictor: QuantilePredictor, batch: TrainingBatch, ladder: AlphaLadder,
               lambdas: LossWeights, K: float) -> Tensor:
    raw, _ = predictor.forward(batch.inputs)
    q = raw + batch.delta
    return total_loss(loss_components(batch.s, q, ladder, batch.cov, K), lambdas)


def fit_predictor(predictor: QuantilePredictor, batch: TrainingBatch, ladder: AlphaLadder,
                  stages: Sequence[int], lambdas: LossWeights, K: float, lr: float = 1e-2) -> TrainingLog:
    """
    Three-stage training with Adam on full batches.

    Stage 1 fits the quantile loss alone, stage 2 adds the coverage and
    efficiency losses, stage 3 adds the monotonicity loss.
    """
    log = TrainingLog()
    for k, epochs in enumerate(stages, start=1):
        if epochs <= 0:
            continue
        weights = lambdas.stage(k)
        losses = []
        for _ in range(epochs):
            loss = batch_loss(predictor, batch, ladder, weights, K)
            losses.append(loss.item())
            if not loss.requires_grad:
                break
            ad.backward(loss)
            ad.adam_step(predictor.params, lr=lr)
        with ad.no_grad():
            losses.append(batch_loss(predictor, batch, ladder, weights, K).item())
        log.stage_losses[k] = losses
        logger.debug(f"Stage {k}: loss {losses[0]:.5f} -> {losses[-1]:.5f} over {epochs} epochs")
        if k == 1 and losses[-1] > losses[0]:
            logger.warning(f"Stage 1 loss increased from {losses[0]:.5f} to {losses[-1]:.5f}")
    return log


# --- controller -------------------------------------------------------------

@dataclass(frozen=True)
class Normalization:
    """Location/scale used to normalize the data views."""

    y_mean: float = 0.0
    y_std: float = 1.0
    views: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def fit(cls, series: SeriesInput) -> "Normalization":
        def stats(x):
            x = np.asarray(x, dtype=np.float64)
            return (float(x.mean()), float(x.std()) or 1.0) if len(x) else (0.0, 1.0)

        y_mean, y_std = stats(series.y)
        return cls(y_mean, y_std, {k: stats(v) for k, v in series.views.items()})


def encoder_for(ladder: AlphaLadder, view_names: Sequence[str] = (), n_regions: int = 1,
                **kwargs) -> EncoderConfig:
    """Encoder layout for a target view, extra sequence views and the (tau, region) static view."""
    views = [ViewSpec('y', SEQUENCE, 1)] + [ViewSpec(name, SEQUENCE, 1) for name in view_names]
    views.append(ViewSpec('static', STATIC, 1 + n_regions))
    return EncoderConfig(n=ladder.n, views=tuple(views), **kwargs)


class NccController(ConformalController):
    """
    Online NCC controller for one series and one horizon.

    The predictor may be shared between controllers (few-shot transfer);
    training only ever happens inside ``before_issue``.
    """

    method = 'ncc'

    def __init__(self, state: NccState, predictor: QuantilePredictor, tau: int = 1,
                 region: int = 0, n_regions: int = 1,
                 normalization: Optional[Normalization] = None):
        super().__init__(state.ladder, tau)
        if predictor.config.n != state.ladder.n:
            raise InvalidParameterError(
                f"Predictor emits {predictor.config.n} quantiles, ladder has {state.ladder.n}"
            )
        if not 0 <= region < n_regions:
            raise InvalidParameterError(f"Region {region} outside [0, {n_regions})")
        self.state = state
        self.predictor = predictor
        self.region = region
        self.n_regions = n_regions
        self.normalization = normalization or Normalization()
        self.trained = False
        self.issued = 0
        self.issued_consistent = 0
        self.sequence_views = [v.name for v in predictor.config.views if v.kind == SEQUENCE]

    @property
    def window(self) -> int:
        return self.predictor.config.window

    # inputs

    def _static(self) -> np.ndarray:
        static = np.zeros(1 + self.n_regions)
        static[0] = float(self.tau)
        static[1 + self.region] = 1.0
        return static

    def _observed(self, name: str) -> np.ndarray:
        if name == 'y':
            values, (mean, std) = self.observed, (self.normalization.y_mean, self.normalization.y_std)
        else:
            if name not in self.observed_views:
                raise InvalidInputError(f"View '{name}' was never observed")
            values = self.observed_views[name]
            mean, std = self.normalization.views.get(name, (0.0, 1.0))
        return (np.asarray(values, dtype=np.float64) - mean) / std

    def build_inputs(self, issue_times) -> PredictorInputs:
        """Predictor inputs for ladders issued at the given times (data through each time only)."""
        issue_times = np.asarray(issue_times, dtype=np.int64)
        L, n = self.window, self.n
        scale = self.state.score_scale
        counts = np.searchsorted(self.history.times, issue_times, side='right')

        def windows(rows: np.ndarray, width: int, pad: float) -> np.ndarray:
            rows = rows.reshape(-1, width)
            padded = np.vstack([np.full((L, rows.shape[1]), pad), rows])
            view = np.lib.stride_tricks.sliding_window_view(padded, L, axis=0)   # [N+1, c, L]
            return np.transpose(view[counts], (0, 2, 1))

        err = windows(np.asarray(self.history.errs, dtype=np.float64), n, PAD_ERR)
        q = windows(self.history.quantiles / scale, n, PAD_PREDICTION)
        s = windows(self.history.scores / scale, 1, PAD_PREDICTION)

        views = {}
        for name in self.sequence_views:
            series = np.concatenate([np.zeros(L), self._observed(name)])
            view = np.lib.stride_tricks.sliding_window_view(series, L)
            views[name] = view[issue_times + 1][:, :, None]
        views['static'] = np.tile(self._static(), (len(issue_times), 1))
        return PredictorInputs(err=err, q=q, s=s, views=views)

    def training_batch(self) -> TrainingBatch:
        """Sliding windows over the most recent records, each seeing data through its issue time."""
        N = len(self.history)
        if N < self.window + 1:
            raise InsufficientDataError(
                f"Training needs at least {self.window + 1} scored steps, history has {N}"
            )
        keep = np.arange(max(0, N - self.state.max_train_windows), N)
        records = [self.history[i] for i in keep]
        issue_times = np.array([r.t - self.tau for r in records], dtype=np.int64)
        counts = np.searchsorted(self.history.times, issue_times, side='right')
        running = running_error_path(self.history.errs, self.state.w)[counts]
        scale = self.state.score_scale
        return TrainingBatch(
            inputs=self.build_inputs(issue_times),
            s=np.array([[r.s] for r in records]) / scale,
            delta=np.vstack([r.ladder.delta for r in records]) / scale,
            cov=cov_indicator(running, self.ladder.as_array()).astype(np.float64),
        )

    def train(self, stages: Optional[Sequence[int]] = None) -> TrainingLog:
        stages = tuple(self.state.stages if stages is None else stages)
        batch = self.training_batch()
        log = fit_predictor(self.predictor, batch, self.ladder, stages, self.state.lambdas,
                            self.state.K / self.state.score_scale, self.state.lr)
        self.trained = True
        logger.info(f"ncc tau={self.tau}: trained on {len(batch)} windows, stages {stages}")
        return log

    def before_issue(self, t: int, warmup: int):
        if t == warmup and not self.trained and sum(self.state.stages) > 0:
            if len(self.history) >= self.window + 1:
                self.train(self.state.stages)
            else:
                logger.warning(f"ncc tau={self.tau}: {len(self.history)} burn-in steps are too few "
                               f"to train (need {self.window + 1}); continuing untrained")
        elif t > warmup and self.state.retrain_interval and t % self.state.retrain_interval == 0 \
                and sum(self.state.retrain_stages) > 0 and len(self.history) >= self.window + 1:
            logger.debug(f"ncc tau={self.tau}: retraining at t={t}")
            self.train(self.state.retrain_stages)

    # inference

    def _issue(self, t: int) -> Tuple[QuantileLadder, int, bool]:
        ladder_norm, embedding = predictor_forward(self.build_inputs([t]), self.predictor)
        q_raw = ladder_norm[0] * self.state.score_scale
        running = self.history.running_errors(self.state.w)
        ladder = conformalize(q_raw, self.state, running)
        iters, complete = 0, True
        tta = self.state.tta
        consistent = ladder_consistent(ladder.q_conf)
        if tta.enabled and not consistent:
            dcs_if_crossed = self.issued_consistent / (self.issued + 1)
            if dcs_if_crossed < tta.dcs_threshold:
                ladder, iters, complete = tta_adjust(q_raw, ladder.delta, embedding.z_combined.values[0],
                                                     tta, self.ladder)
                consistent = ladder_consistent(ladder.q_conf)
        self.issued += 1
        self.issued_consistent += consistent
        return ladder, iters, complete

    # checkpoints

    def state_payload(self) -> dict:
        """Everything needed to resume this controller bit-exactly."""
        records = self.history.records
        s = self.state
        cfg = self.predictor.config

        def stack(getter, width=None):
            if not records:
                return np.zeros((0,) if width is None else (0, width))
            return np.array([getter(r) for r in records], dtype=np.float64)

        return {
            'params': self.predictor.params,
            'encoder': {'n': cfg.n, 'hidden': cfg.hidden, 'heads': cfg.heads, 'window': cfg.window,
                        'head_hidden': cfg.head_hidden,
                        'views': [[v.name, v.kind, v.dim] for v in cfg.views]},
            'ncc': {'alphas': list(s.ladder.alphas), 'eta': s.eta, 'w': s.w, 'K': s.K,
                    'score_scale': s.score_scale, 'lambdas': s.lambdas.as_dict(),
                    'retrain_interval': s.retrain_interval, 'stages': list(s.stages),
                    'retrain_stages': list(s.retrain_stages), 'tta': asdict(s.tta), 'lr': s.lr,
                    'max_train_windows': s.max_train_windows, 'steps': s.steps},
            'controller': {'tau': self.tau, 'region': self.region, 'n_regions': self.n_regions,
                           'trained': self.trained, 'issued': self.issued,
                           'issued_consistent': self.issued_consistent, 'seed': self.predictor.seed,
                           'normalization': {'y_mean': self.normalization.y_mean,
                                             'y_std': self.normalization.y_std,
                                             'views': {k: list(v) for k, v in self.normalization.views.items()}},
                           'pending': [{'target': target, 'issued_at': p.issued_at, 'y_hat': p.y_hat,
                                        'q_raw': p.ladder.q_raw.tolist(), 'delta': p.ladder.delta.tolist(),
                                        'adjustment': p.ladder.adjustment.tolist(),
                                        'tta_iters': p.tta_iters, 'tta_complete': p.tta_complete}
                                       for target, p in sorted(self._pending.items())],
                           'views': {k: list(v) for k, v in self.observed_views.items()}},
            'delta': s.delta,
            'observed': np.asarray(self.observed, dtype=np.float64),
            'rec_t': stack(lambda r: r.t),
            'rec_y': stack(lambda r: r.y),
            'rec_y_hat': stack(lambda r: r.y_hat),
            'rec_q_raw': stack(lambda r: r.ladder.q_raw, self.n),
            'rec_delta': stack(lambda r: r.ladder.delta, self.n),
            'rec_adjustment': stack(lambda r: r.ladder.adjustment, self.n),
            'rec_tta': stack(lambda r: (r.tta_iters, float(r.tta_complete)), 2),
        }

    def save(self, path, codec: Optional[CheckpointCodec] = None):
        (codec or CheckpointCodec()).write(path, self.state_payload())

    @classmethod
    def from_payload(cls, payload: dict) -> "NccController":
        try:
            enc, ncc, ctl = payload['encoder'], payload['ncc'], payload['controller']
            ladder = AlphaLadder(tuple(ncc['alphas']))
            config = EncoderConfig(n=enc['n'], hidden=enc['hidden'], heads=enc['heads'],
                                   window=enc['window'], head_hidden=enc['head_hidden'],
                                   views=tuple(ViewSpec(*v) for v in enc['views']))
            predictor = QuantilePredictor(config, seed=ctl['seed'])
            params: ParamStore = payload['params']
            predictor.params.restore(params.snapshot())
            predictor.params.slots = params.slots
            predictor.params.step = params.step
            state = NccState(ladder=ladder, eta=ncc['eta'], w=ncc['w'], K=ncc['K'],
                             score_scale=ncc['score_scale'], lambdas=LossWeights(**ncc['lambdas']),
                             retrain_interval=ncc['retrain_interval'], stages=tuple(ncc['stages']),
                             retrain_stages=tuple(ncc['retrain_stages']), tta=TtaConfig(**ncc['tta']),
                             lr=ncc['lr'], max_train_windows=ncc['max_train_windows'],
                             delta=payload['delta'], steps=ncc['steps'])
            norm = ctl['normalization']
            normalization = Normalization(norm['y_mean'], norm['y_std'],
                                          {k: tuple(v) for k, v in norm['views'].items()})
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Checkpoint is missing NCC state: {e}") from e

        controller = cls(state, predictor, tau=ctl['tau'], region=ctl['region'],
                         n_regions=ctl['n_regions'], normalization=normalization)
        controller.trained = ctl['trained']
        controller.issued = ctl['issued']
        controller.issued_consistent = ctl['issued_consistent']
        controller.observed = [float(v) for v in payload['observed']]
        controller.observed_views = {k: [float(x) for x in v] for k, v in ctl['views'].items()}
        for i in range(len(payload['rec_t'])):
            ladder_i = QuantileLadder.build(payload['rec_q_raw'][i], payload['rec_delta'][i],
                                            payload['rec_adjustment'][i])
            iters, complete = payload['rec_tta'][i]
            controller.history.append(StepRecord.score(
                int(payload['rec_t'][i]), payload['rec_y'][i], payload['rec_y_hat'][i],
                controller.tau, ladder_i, int(iters), bool(complete)))
        for p in ctl['pending']:
            controller._pending[int(p['target'])] = Issuance(
                p['issued_at'], p['y_hat'], QuantileLadder.build(p['q_raw'], p['delta'], p['adjustment']),
                p['tta_iters'], p['tta_complete'])
        return controller

    @classmethod
    def load(cls, path, codec: Optional[CheckpointCodec] = None) -> "NccController":
        return cls.from_payload((codec or CheckpointCodec()).read(path))


def ncc_step(controller: NccController, t: int, y: float, y_hat_next: Optional[float],
             views: Optional[Dict[str, float]] = None) -> Tuple[Optional[StepRecord], QuantileLadder]:
    """Observe y_t, score the ladder issued for t, and issue the ladder for t + tau."""
    record = controller.observe(t, y, views)
    return record, controller.issue(t, y_hat_next)


def train(controller: NccController, stages: Optional[Sequence[int]] = None) -> TrainingLog:
    """Run the staged training schedule on the controller's history."""
    return controller.train(stages)


def online_run(series: SeriesInput, forecaster, controller: NccController,
               warmup: int, start: int = 0) -> List[StepRecord]:
    """
    Real-time emulation: observe, retrain on schedule, issue, strictly in time order.

    Args:
        series: target series and views
        forecaster: ForecastBundle, fitted forecaster or (t, tau) -> y_hat callable
        controller: fresh NCC controller
        warmup: first issue time whose record is emitted; initial training happens here
        start: first issue time (burn-in runs from start to warmup)
    """
    return run_online(controller, series, as_forecast_fn(forecaster, series.y), start, warmup)
