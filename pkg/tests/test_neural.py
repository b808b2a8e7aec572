"""
Test the quantile predictor building blocks and the full forward pass.
"""

import time

import numpy as np
import pytest
from scipy.special import expit, softmax

from conformal_control import autodiff as ad
from conformal_control.autodiff import ParamStore, Tensor
from conformal_control.errors import InvalidParameterError, ShapeError
from conformal_control.neural import (
    SEQUENCE,
    STATIC,
    EncoderConfig,
    PredictorInputs,
    QuantilePredictor,
    ViewSpec,
    attention_fuse,
    gru_encode,
    init_attention,
    init_gru,
    init_head,
    monotone_head,
    predictor_forward,
)


def reference_gru(seq, params, prefix):
    """Step-by-step GRU on a single [L, d] sequence."""
    w_x, w_h = params[f'{prefix}.w_x'].values, params[f'{prefix}.w_h'].values
    b_x, b_h = params[f'{prefix}.b_x'].values, params[f'{prefix}.b_h'].values
    H = w_h.shape[0]
    h = np.zeros(H)
    for x in seq:
        gx, gh = x @ w_x + b_x, h @ w_h + b_h
        r = expit(gx[:H] + gh[:H])
        z = expit(gx[H:2 * H] + gh[H:2 * H])
        n = np.tanh(gx[2 * H:] + r * gh[2 * H:])
        h = (1 - z) * n + z * h
    return h


def reference_attention(keys, query, params, prefix, heads):
    """Multi-head attention for one batch row, head by head."""
    def proj(x, name):
        return x @ params[f'{prefix}.{name}.w'].values + params[f'{prefix}.{name}.b'].values

    K = np.stack(keys)
    H = K.shape[1]
    dh = H // heads
    q, k, v = proj(query, 'q'), proj(K, 'k'), proj(K, 'v')
    out = np.zeros(H)
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        w = softmax(k[:, cols] @ q[cols] / np.sqrt(dh))
        out[cols] = w @ v[:, cols]
    return proj(out, 'o')


def random_inputs(rng, config, batch=1):
    views = {}
    for view in config.views:
        shape = (batch, config.window, view.dim) if view.kind == SEQUENCE else (batch, view.dim)
        views[view.name] = rng.normal(size=shape)
    return PredictorInputs(
        err=(rng.uniform(size=(batch, config.window, config.n)) > 0.5).astype(float),
        q=rng.uniform(0, 2, size=(batch, config.window, config.n)),
        s=rng.uniform(0, 2, size=(batch, config.window, 1)),
        views=views,
    )


class TestGRU:

    def test_zero_input_gives_zero_state(self, rng) -> None:
        params = ParamStore()
        init_gru(params, 'g', 3, 5, rng)
        np.testing.assert_array_equal(gru_encode(np.zeros((4, 3)), params, 'g').values, np.zeros((1, 5)))

    def test_stateful(self, rng) -> None:
        params = ParamStore()
        init_gru(params, 'g', 2, 4, rng)
        step = rng.normal(size=(1, 2))
        once = gru_encode(step, params, 'g').values
        twice = gru_encode(np.vstack([step, step]), params, 'g').values
        assert not np.allclose(once, twice)

    def test_matches_reference(self, rng) -> None:
        params = ParamStore()
        init_gru(params, 'g', 3, 6, rng)
        params['g.b_x'].values = rng.normal(size=18)
        params['g.b_h'].values = rng.normal(size=18)
        seq = rng.normal(size=(3, 3))
        np.testing.assert_allclose(gru_encode(seq, params, 'g').values[0], reference_gru(seq, params, 'g'),
                                   atol=1e-10)

    def test_input_width_mismatch(self, rng) -> None:
        params = ParamStore()
        init_gru(params, 'g', 3, 4, rng)
        with pytest.raises(ShapeError):
            gru_encode(np.zeros((2, 5)), params, 'g')


class TestAttention:

    @pytest.fixture
    def params(self, rng):
        params = ParamStore()
        init_attention(params, 'att', 8, rng)
        return params

    def test_single_key_is_projected_value(self, params, rng) -> None:
        key = rng.normal(size=(1, 8))
        out = attention_fuse([Tensor(key)], params, 'att', heads=2).values
        v = key @ params['att.v.w'].values + params['att.v.b'].values
        expected = v @ params['att.o.w'].values + params['att.o.b'].values
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_permutation_invariant(self, params, rng) -> None:
        keys = [Tensor(rng.normal(size=(2, 8))) for _ in range(4)]
        a = attention_fuse(keys, params, 'att', heads=2).values
        b = attention_fuse(keys[::-1], params, 'att', heads=2).values
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_matches_reference(self, params, rng) -> None:
        keys = [rng.normal(size=8) for _ in range(3)]
        query = rng.normal(size=8)
        out = attention_fuse([Tensor(k[None, :]) for k in keys], params, 'att', heads=4,
                             query=Tensor(query[None, :])).values[0]
        np.testing.assert_allclose(out, reference_attention(keys, query, params, 'att', 4), atol=1e-10)

    def test_head_divisibility(self, params, rng) -> None:
        with pytest.raises(InvalidParameterError):
            attention_fuse([Tensor(rng.normal(size=(1, 8)))], params, 'att', heads=3)

    def test_needs_a_key(self, params) -> None:
        with pytest.raises(ShapeError):
            attention_fuse([], params, 'att', heads=2)


class TestMonotoneHead:

    def _head(self, bias) -> ParamStore:
        n = len(bias)
        params = ParamStore()
        init_head(params, 'head', 4, 3, n, np.random.default_rng(0))
        params['head.l2.w'].values = np.zeros((3, n))
        params['head.l2.b'].values = np.array(bias, dtype=np.float64)
        return params

    def test_hand_example(self) -> None:
        ladder, deltas = monotone_head(Tensor(np.ones((1, 4))), self._head([2.0, -1.0, 0.5]), 'head', 3)
        np.testing.assert_allclose(deltas.values, [[2.0, 0.0, 0.5]])
        np.testing.assert_allclose(ladder.values, [[2.0, 2.0, 2.5]])

    def test_non_positive_outputs_give_zero_ladder(self) -> None:
        ladder, _ = monotone_head(Tensor(np.ones((1, 4))), self._head([-1.0, -0.5, 0.0]), 'head', 3)
        np.testing.assert_array_equal(ladder.values, np.zeros((1, 3)))

    def test_single_level(self) -> None:
        ladder, _ = monotone_head(Tensor(np.ones((1, 4))), self._head([-3.0]), 'head', 1)
        np.testing.assert_array_equal(ladder.values, [[0.0]])
        ladder, _ = monotone_head(Tensor(np.ones((1, 4))), self._head([1.5]), 'head', 1)
        np.testing.assert_array_equal(ladder.values, [[1.5]])

    def test_monotone_for_random_parameters(self, rng) -> None:
        violations = 0
        for _ in range(1000):
            params = ParamStore()
            init_head(params, 'head', 6, 5, 4, rng)
            for _, p in params.items():
                p.values = rng.normal(scale=2.0, size=p.shape)
            ladder, _ = monotone_head(Tensor(rng.normal(size=(3, 6))), params, 'head', 4)
            violations += int(np.any(ladder.values < 0) or np.any(np.diff(ladder.values, axis=-1) < 0))
        assert violations == 0

    def test_gradient(self, rng) -> None:
        params = ParamStore()
        init_head(params, 'head', 4, 5, 3, rng)
        params['head.l1.b'].values = np.full(5, 0.5)
        params['head.l2.b'].values = np.full(3, 3.0)

        def f(z):
            ladder, _ = monotone_head(z, params, 'head', 3)
            return ad.sum_(ad.square(ladder))

        assert ad.grad_check(f, rng.normal(size=(2, 4)) * 0.1) < 1e-4


class TestQuantilePredictor:

    def test_config_validation(self) -> None:
        with pytest.raises(InvalidParameterError):
            EncoderConfig(n=3, hidden=8, heads=3)
        with pytest.raises(InvalidParameterError):
            EncoderConfig(n=0)
        with pytest.raises(InvalidParameterError):
            EncoderConfig(n=3, window=0)
        with pytest.raises(InvalidParameterError):
            ViewSpec('x', 'graph', 1)

    def test_output_is_monotone_ladder(self, rng, small_encoder_kwargs) -> None:
        config = EncoderConfig(n=5, **small_encoder_kwargs)
        for seed in range(10):
            ladder, embedding = predictor_forward(random_inputs(rng, config, batch=3),
                                                  QuantilePredictor(config, seed=seed))
            assert ladder.shape == (3, 5)
            assert np.all(ladder >= 0) and np.all(np.diff(ladder, axis=1) >= 0)
            assert embedding.z_combined.shape == (3, small_encoder_kwargs['hidden'])

    def test_deterministic(self, rng, small_encoder_kwargs) -> None:
        config = EncoderConfig(n=3, **small_encoder_kwargs)
        inputs = random_inputs(rng, config)
        a, _ = predictor_forward(inputs, QuantilePredictor(config, seed=4))
        b, _ = predictor_forward(inputs, QuantilePredictor(config, seed=4))
        np.testing.assert_array_equal(a, b)

    def test_window_sensitivity(self, rng, small_encoder_kwargs) -> None:
        short = EncoderConfig(n=3, **small_encoder_kwargs)
        long = EncoderConfig(n=3, **{**small_encoder_kwargs, 'window': 2 * short.window})
        inputs = random_inputs(rng, short)

        def pad(arr):
            return np.concatenate([np.repeat(arr[:, :1], short.window, axis=1), arr], axis=1)

        padded = PredictorInputs(pad(inputs.err), pad(inputs.q), pad(inputs.s),
                                 {'y': pad(inputs.views['y']), 'static': inputs.views['static']})
        # parameter shapes do not depend on the window, so one seed gives the same weights
        _, emb_a = predictor_forward(inputs, QuantilePredictor(short, seed=1))
        _, emb_b = predictor_forward(padded, QuantilePredictor(long, seed=1))
        assert not np.allclose(emb_a.z_combined.values, emb_b.z_combined.values)

    def test_static_feature_sensitivity(self, rng, small_encoder_kwargs) -> None:
        config = EncoderConfig(n=3, **small_encoder_kwargs,
                               views=(ViewSpec('y', SEQUENCE, 1), ViewSpec('static', STATIC, 2)))
        predictor = QuantilePredictor(config, seed=2)
        inputs = random_inputs(rng, config)
        inputs.views['static'] = np.array([[1.0, 0.0]])
        _, a = predictor_forward(inputs, predictor)
        inputs.views['static'] = np.array([[-1.0, 0.0]])
        _, b = predictor_forward(inputs, predictor)
        assert not np.allclose(a.z_data.values, b.z_data.values)

    def test_shape_checks(self, rng, small_encoder_kwargs) -> None:
        config = EncoderConfig(n=3, **small_encoder_kwargs)
        predictor = QuantilePredictor(config)
        inputs = random_inputs(rng, config)
        with pytest.raises(ShapeError):
            predictor.forward(PredictorInputs(inputs.err[:, 1:], inputs.q, inputs.s, inputs.views))
        with pytest.raises(ShapeError):
            predictor.forward(PredictorInputs(inputs.err, inputs.q, inputs.s, {'y': inputs.views['y']}))

    def test_batch_helpers(self, rng, small_encoder_kwargs) -> None:
        config = EncoderConfig(n=3, **small_encoder_kwargs)
        inputs = random_inputs(rng, config, batch=4)
        joined = PredictorInputs.concat([inputs.take(slice(0, 1)), inputs.take(slice(1, 4))])
        assert joined.batch_size == 4
        np.testing.assert_array_equal(joined.q, inputs.q)
        np.testing.assert_array_equal(joined.views['static'], inputs.views['static'])

    @pytest.mark.slow
    def test_forward_pass_latency(self, rng) -> None:
        config = EncoderConfig(n=11)
        assert (config.window, config.hidden) == (32, 32)
        predictor = QuantilePredictor(config, seed=0)
        inputs = random_inputs(rng, config)
        predictor_forward(inputs, predictor)
        timings = []
        for _ in range(50):
            start = time.perf_counter()
            predictor_forward(inputs, predictor)
            timings.append(time.perf_counter() - start)
        # one step should take about a millisecond; allow a 10x margin for slow machines
        assert np.median(timings) < 10e-3
