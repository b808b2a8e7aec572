"""
Quantile predictor network.

Conformal signals (coverage errors, conformalized quantiles, scores) are
encoded by one GRU each with the per-alpha values stacked as channels.
Sequence views get their own GRU, static views a feed-forward encoder.
Views are fused into ``z_data`` by multi-head attention, and
``z_data`` attends over (z_err, z_q, z_s, z_data) to form the combined
embedding. A ReLU MLP head followed by a cumulative sum yields a
non-negative ladder that is non-decreasing as alpha decreases.

All quantities here are in normalized score units; callers rescale.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import InvalidParameterError, ShapeError

logger = logging.getLogger(__name__)

SEQUENCE = 'sequence'
STATIC = 'static'


@dataclass(frozen=True)
class ViewSpec:
    name: str
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in (SEQUENCE, STATIC):
            raise InvalidParameterError(f"View {self.name}: kind must be 'sequence' or 'static'")
        if self.dim < 1:
            raise InvalidParameterError(f"View {self.name}: dimension must be >= 1")


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the quantile predictor."""

    n: int
    hidden: int = 32
    heads: int = 4
    window: int = 32
    head_hidden: int = 64
    views: Tuple[ViewSpec, ...] = field(default_factory=lambda: (
        ViewSpec('y', SEQUENCE, 1), ViewSpec('static', STATIC, 1)))

    def __post_init__(self):
        if self.n < 1:
            raise InvalidParameterError(f"Ladder size must be >= 1, got {self.n}")
        if self.window < 1:
            raise InvalidParameterError(f"Context window must be >= 1, got {self.window}")
        if self.heads < 1 or self.hidden % self.heads != 0:
            raise InvalidParameterError(
                f"Hidden size {self.hidden} is not divisible by {self.heads} heads"
            )
        names = [v.name for v in self.views]
        if len(set(names)) != len(names) or not names:
            raise InvalidParameterError(f"View names must be unique and non-empty: {names}")


@dataclass
class PredictorInputs:
    """
    A batch of predictor inputs.

    err, q: [B, L, n]; s: [B, L, 1]; views maps sequence views to [B, L, d]
    and static views to [B, d].
    """

    err: np.ndarray
    q: np.ndarray
    s: np.ndarray
    views: Dict[str, np.ndarray]

    @property
    def batch_size(self) -> int:
        return self.err.shape[0]

    def take(self, index) -> "PredictorInputs":
        return PredictorInputs(self.err[index], self.q[index], self.s[index],
                               {k: v[index] for k, v in self.views.items()})

    @staticmethod
    def concat(parts: Sequence["PredictorInputs"]) -> "PredictorInputs":
        return PredictorInputs(
            np.concatenate([p.err for p in parts]),
            np.concatenate([p.q for p in parts]),
            np.concatenate([p.s for p in parts]),
            {k: np.concatenate([p.views[k] for p in parts]) for k in parts[0].views},
        )


@dataclass
class CombinedEmbedding:
    z_combined: Tensor
    z_data: Tensor
    z_err: Tensor
    z_q: Tensor
    z_s: Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_gru(params: ParamStore, prefix: str, d: int, hidden: int, rng: np.random.Generator):
    params.add(f'{prefix}.w_x', glorot(rng, d, 3 * hidden))
    params.add(f'{prefix}.w_h', glorot(rng, hidden, 3 * hidden))
    params.add(f'{prefix}.b_x', np.zeros(3 * hidden))
    params.add(f'{prefix}.b_h', np.zeros(3 * hidden))


def gru_encode(seq, params: ParamStore, prefix: str) -> Tensor:
    """Final hidden state of a GRU run from a zero state over [B, L, d] (or [L, d])."""
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    if seq.ndim == 2:
        seq = ad.reshape(seq, (1,) + seq.shape)
    w_x = params[f'{prefix}.w_x']
    if seq.ndim != 3 or seq.shape[2] != w_x.shape[0]:
        raise ShapeError(f"{prefix}: sequence {seq.shape} does not match input weights {w_x.shape}")
    hidden = params[f'{prefix}.w_h'].shape[0]
    h0 = Tensor(np.zeros((seq.shape[0], hidden)))
    return ad.gru(seq, h0, w_x, params[f'{prefix}.w_h'], params[f'{prefix}.b_x'], params[f'{prefix}.b_h'])


def init_dense(params: ParamStore, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    params.add(f'{prefix}.w', glorot(rng, fan_in, fan_out))
    params.add(f'{prefix}.b', np.zeros(fan_out))


def dense(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    return ad.matmul(x, params[f'{prefix}.w']) + params[f'{prefix}.b']


def init_attention(params: ParamStore, prefix: str, hidden: int, rng: np.random.Generator):
    for proj in ('q', 'k', 'v', 'o'):
        init_dense(params, f'{prefix}.{proj}', hidden, hidden, rng)


def attention_fuse(keys: Sequence[Tensor], params: ParamStore, prefix: str, heads: int,
                   query: Optional[Tensor] = None) -> Tensor:
    """
    Scaled dot-product multi-head attention pooled to one [B, H] vector.

    The query defaults to the mean of the keys, which keeps the fusion
    invariant to the order of the key/value set.
    """
    if not keys:
        raise ShapeError(f"{prefix}: attention needs at least one embedding")
    B, H = keys[0].shape
    if H % heads != 0:
        raise InvalidParameterError(f"{prefix}: hidden size {H} not divisible by {heads} heads")
    d_head = H // heads
    m = len(keys)
    stacked = ad.concat([ad.reshape(k, (B, 1, H)) for k in keys], axis=1)       # [B, m, H]
    if query is None:
        query = ad.mean(stacked, axis=1)
    q = dense(query, params, f'{prefix}.q')                                     # [B, H]
    k = dense(stacked, params, f'{prefix}.k')                                   # [B, m, H]
    v = dense(stacked, params, f'{prefix}.v')
    q = ad.transpose(ad.reshape(q, (B, 1, heads, d_head)), (0, 2, 1, 3))        # [B, h, 1, dh]
    k = ad.transpose(ad.reshape(k, (B, m, heads, d_head)), (0, 2, 3, 1))        # [B, h, dh, m]
    v = ad.transpose(ad.reshape(v, (B, m, heads, d_head)), (0, 2, 1, 3))        # [B, h, m, dh]
    weights = ad.softmax(ad.matmul(q, k) * (1.0 / np.sqrt(d_head)), axis=-1)    # [B, h, 1, m]
    pooled = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (B, H))
    return dense(pooled, params, f'{prefix}.o')


def init_head(params: ParamStore, prefix: str, hidden: int, head_hidden: int, n: int,
              rng: np.random.Generator):
    init_dense(params, f'{prefix}.l1', hidden, head_hidden, rng)
    init_dense(params, f'{prefix}.l2', head_hidden, n, rng)


def monotone_head(z: Tensor, params: ParamStore, prefix: str, n: int) -> Tuple[Tensor, Tensor]:
    """
    MLP -> ReLU -> cumulative sum along the ladder axis.

    Returns (ladder, deltas): deltas[0] is the base quantile at the largest
    alpha, deltas[1:] the non-negative increments.
    """
    pre = dense(ad.relu(dense(z, params, f'{prefix}.l1')), params, f'{prefix}.l2')
    if pre.shape[-1] != n:
        raise ShapeError(f"{prefix}: head emits {pre.shape[-1]} values for a ladder of {n}")
    deltas = ad.relu(pre)
    return ad.cumsum(deltas, axis=-1), deltas


class QuantilePredictor:
    """Multi-view quantile predictor with a structurally monotone output ladder"""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        H = config.hidden
        init_gru(self.params, 'enc.err', config.n, H, rng)
        init_gru(self.params, 'enc.q', config.n, H, rng)
        init_gru(self.params, 'enc.s', 1, H, rng)
        for view in config.views:
            if view.kind == SEQUENCE:
                init_gru(self.params, f'view.{view.name}', view.dim, H, rng)
            else:
                init_dense(self.params, f'view.{view.name}', view.dim, H, rng)
        init_attention(self.params, 'fuse.data', H, rng)
        init_attention(self.params, 'fuse.all', H, rng)
        init_head(self.params, 'head', H, config.head_hidden, config.n, rng)
        logger.debug(f"Quantile predictor with {self.params.num_parameters()} parameters")

    def _check(self, inputs: PredictorInputs):
        cfg = self.config
        B = inputs.batch_size
        expected = {'err': (B, cfg.window, cfg.n), 'q': (B, cfg.window, cfg.n), 's': (B, cfg.window, 1)}
        for name, shape in expected.items():
            got = getattr(inputs, name).shape
            if got != shape:
                raise ShapeError(f"Predictor input {name}: expected {shape}, got {got}")
        for view in cfg.views:
            if view.name not in inputs.views:
                raise ShapeError(f"Predictor input is missing view '{view.name}'")
            want = (B, cfg.window, view.dim) if view.kind == SEQUENCE else (B, view.dim)
            if inputs.views[view.name].shape != want:
                raise ShapeError(
                    f"View '{view.name}': expected {want}, got {inputs.views[view.name].shape}"
                )

    def forward(self, inputs: PredictorInputs) -> Tuple[Tensor, CombinedEmbedding]:
        self._check(inputs)
        cfg, p = self.config, self.params
        z_err = gru_encode(inputs.err, p, 'enc.err')
        z_q = gru_encode(inputs.q, p, 'enc.q')
        z_s = gru_encode(inputs.s, p, 'enc.s')
        view_embeddings = []
        for view in cfg.views:
            x = inputs.views[view.name]
            if view.kind == SEQUENCE:
                view_embeddings.append(gru_encode(x, p, f'view.{view.name}'))
            else:
                view_embeddings.append(ad.relu(dense(Tensor(x), p, f'view.{view.name}')))
        z_data = attention_fuse(view_embeddings, p, 'fuse.data', cfg.heads)
        z_combined = attention_fuse([z_err, z_q, z_s, z_data], p, 'fuse.all', cfg.heads, query=z_data)
        ladder, _ = monotone_head(z_combined, p, 'head', cfg.n)
        return ladder, CombinedEmbedding(z_combined, z_data, z_err, z_q, z_s)


def predictor_forward(inputs: PredictorInputs,
                      predictor: QuantilePredictor) -> Tuple[np.ndarray, CombinedEmbedding]:
    """Inference pass without graph recording; returns the [B, n] ladder as an array."""
    with ad.no_grad():
        ladder, embedding = predictor.forward(inputs)
    return ladder.values, embedding
