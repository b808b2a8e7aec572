"""
Test the reverse-mode autodiff engine, Adam and parameter checkpoints.
"""

import numpy as np
import pytest

from conformal_control import autodiff as ad
from conformal_control.autodiff import ParamStore, Tensor, adam_step, grad_check
from conformal_control.checkpoint import CheckpointCodec
from conformal_control.errors import (
    InvalidInputError,
    InvalidParameterError,
    SchemaError,
    ShapeError,
    StateError,
)


class TestForwardOps:

    def test_relu(self) -> None:
        np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).values, [0.0, 0.0, 2.0])

    def test_cumsum(self) -> None:
        np.testing.assert_allclose(ad.cumsum(Tensor([2.0, 0.5, 0.2])).values, [2.0, 2.5, 2.7])

    def test_softmax_of_equal_logits_is_uniform(self) -> None:
        np.testing.assert_allclose(ad.softmax(Tensor(np.full((2, 4), 3.0))).values, 0.25)

    def test_concat_and_slice(self) -> None:
        joined = ad.concat([Tensor([[1.0, 2.0]]), Tensor([[3.0]])], axis=-1)
        np.testing.assert_array_equal(joined.values, [[1.0, 2.0, 3.0]])
        np.testing.assert_array_equal(joined[:, 1:].values, [[2.0, 3.0]])

    def test_reductions(self) -> None:
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.sum_(x).item() == 15.0
        np.testing.assert_allclose(ad.mean(x, axis=0).values, [1.5, 2.5, 3.5])

    @pytest.mark.parametrize("op", [ad.add, ad.mul, ad.maximum])
    def test_shape_mismatch_names_both_shapes(self, op) -> None:
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
            op(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_matmul_shape_mismatch(self) -> None:
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_ndarray_on_the_right(self) -> None:
        out = Tensor([1.0, 2.0]) * np.array([3.0, 4.0])
        assert isinstance(out, Tensor)
        np.testing.assert_array_equal(out.values, [3.0, 8.0])


class TestBackward:

    def test_square(self) -> None:
        x = Tensor(3.0, requires_grad=True)
        ad.square(x).backward()
        assert x.grad == pytest.approx(6.0)

    def test_sigmoid_at_zero(self) -> None:
        x = Tensor(0.0, requires_grad=True)
        ad.sigmoid(x).backward()
        assert x.grad == pytest.approx(0.25)

    def test_relu_left_derivative_at_kink(self) -> None:
        x = Tensor([0.0, 1.0], requires_grad=True)
        ad.sum_(ad.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_gradient_accumulates_over_shared_nodes(self) -> None:
        x = Tensor(2.0, requires_grad=True)
        (x * x + x).backward()
        assert x.grad == pytest.approx(5.0)

    def test_non_scalar_loss(self) -> None:
        with pytest.raises(InvalidInputError):
            ad.backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_no_grad_records_nothing(self) -> None:
        x = Tensor(1.0, requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert ad.is_grad_enabled()

    def test_matmul_against_finite_differences(self, rng) -> None:
        weights = rng.normal(size=(3, 2))

        def f(a, b):
            return ad.sum_(ad.matmul(a, b) * weights)

        assert grad_check(f, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], step=1e-5) < 1e-6

    @pytest.mark.parametrize("fn", [ad.tanh, ad.exp, ad.sigmoid, ad.softmax, ad.cumsum, ad.square])
    def test_elementwise_against_finite_differences(self, fn, rng) -> None:
        weights = rng.normal(size=(2, 3))
        assert grad_check(lambda x: ad.sum_(fn(x) * weights), rng.normal(size=(2, 3))) < 1e-6

    def test_log_and_div(self, rng) -> None:
        point = [rng.uniform(0.5, 2.0, size=4), rng.uniform(0.5, 2.0, size=4)]
        assert grad_check(lambda a, b: ad.sum_(ad.log(a) / b), point) < 1e-6

    def test_fused_gru(self, rng) -> None:
        B, L, d, H = 2, 3, 2, 3

        def f(x, w_x, w_h):
            h = ad.gru(x, np.zeros((B, H)), w_x, w_h, np.zeros(3 * H), np.zeros(3 * H))
            return ad.sum_(ad.square(h))

        point = [rng.normal(size=(B, L, d)), rng.normal(size=(d, 3 * H)) * 0.5,
                 rng.normal(size=(H, 3 * H)) * 0.5]
        assert grad_check(f, point) < 1e-6

    def test_deterministic(self) -> None:
        def grads():
            rng = np.random.default_rng(7)
            a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            ad.sum_(ad.tanh(ad.matmul(a, b))).backward()
            return a.grad, b.grad

        (a1, b1), (a2, b2) = grads(), grads()
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)


class TestAdam:

    def _store(self, grad) -> ParamStore:
        store = ParamStore()
        p = store.add('w', [1.0, -2.0])
        p.grad = np.array(grad, dtype=np.float64)
        return store

    def test_zero_gradient_leaves_parameters(self) -> None:
        store = self._store([0.0, 0.0])
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(store['w'].values, [1.0, -2.0])
        assert store['w'].grad is None

    def test_zero_learning_rate_is_identity(self) -> None:
        store = self._store([0.3, -4.0])
        adam_step(store, lr=0.0)
        np.testing.assert_array_equal(store['w'].values, [1.0, -2.0])

    def test_constant_gradient_moves_by_lr(self) -> None:
        store = ParamStore()
        store.add('w', [0.0])
        for _ in range(50):
            before = store['w'].values.copy()
            store['w'].grad = np.array([0.7])
            adam_step(store, lr=0.01)
            assert abs(before - store['w'].values)[0] == pytest.approx(0.01, rel=1e-6)
        assert store.step == 50

    def test_missing_gradients(self) -> None:
        store = ParamStore()
        store.add('w', [1.0])
        with pytest.raises(StateError):
            adam_step(store)


class TestParamStore:

    def test_names_are_unique(self) -> None:
        store = ParamStore()
        store.add('w', [1.0])
        with pytest.raises(InvalidParameterError):
            store.add('w', [2.0])
        with pytest.raises(InvalidParameterError):
            store.bind('w', Tensor([2.0], requires_grad=True))

    def test_snapshot_and_restore(self) -> None:
        store = ParamStore()
        store.add('w', [1.0, 2.0])
        snap = store.snapshot()
        store['w'].values = np.array([5.0, 5.0])
        store.restore(snap)
        np.testing.assert_array_equal(store['w'].values, [1.0, 2.0])
        with pytest.raises(ShapeError):
            store.restore({'w': np.zeros(3)})

    def test_save_load_is_bit_exact(self, tmp_path, rng) -> None:
        store = ParamStore()
        store.add('a', rng.normal(size=(3, 4)))
        store.add('b', rng.normal(size=7) * 1e-300)
        store['a'].grad = rng.normal(size=(3, 4))
        store['b'].grad = rng.normal(size=7)
        adam_step(store)
        path = tmp_path / 'params.ckpt'
        store.save(path)
        loaded = ParamStore.load(path)
        assert list(loaded) == ['a', 'b']
        assert loaded.step == 1
        for name in store:
            assert loaded[name].values.tobytes() == store[name].values.tobytes()
            assert loaded.slots['m'][name].tobytes() == store.slots['m'][name].tobytes()

    def test_rejects_foreign_bytes(self) -> None:
        with pytest.raises(SchemaError):
            CheckpointCodec().decode(b'not a checkpoint')
