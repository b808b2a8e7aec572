"""
Reverse-mode automatic differentiation over dense float64 arrays.

Each operation records its parents and a closure mapping the output
gradient to parent gradients; ``backward`` sweeps the graph in reverse
topological order. Graphs are rebuilt every training step and are never
shared across threads.

Kinks follow the left-derivative convention: ``relu`` has derivative 0 at
0, ``maximum`` routes tied gradients to its second argument.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import InvalidInputError, InvalidParameterError, ShapeError, StateError

logger = logging.getLogger(__name__)

_node_ids = itertools.count()
_grad_mode = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int]


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """A float64 array with an optional gradient and a link into the computation graph."""

    __slots__ = ('values', 'grad', 'requires_grad', 'name', 'node_id', '_parents', '_backward')
    __array_ufunc__ = None

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple["Tensor", ...] = (), _backward: Optional[Callable] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float('nan')

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def backward(self):
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return slice_(self, index)


def tensor(values, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def _lift(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(values)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise arithmetic -------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, 'add')
    return _make(a.values + b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, 'sub')
    return _make(a.values - b.values, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, 'mul')
    return _make(a.values * b.values, (a, b),
                 lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, 'div')
    out = a.values / b.values
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.values, a.shape),
                            _unbroadcast(-g * out / b.values, b.shape)))


def square(a: ArrayLike) -> Tensor:
    a = _lift(a)
    return _make(a.values ** 2, (a,), lambda g: (2.0 * a.values * g,))


def exp(a: ArrayLike) -> Tensor:
    a = _lift(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = _lift(a)
    return _make(np.log(a.values), (a,), lambda g: (g / a.values,))


def relu(a: ArrayLike) -> Tensor:
    a = _lift(a)
    mask = a.values > 0.0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = _lift(a)
    out = expit(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: ArrayLike) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out ** 2),))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, 'maximum')
    mask = a.values > b.values
    return _make(np.where(mask, a.values, b.values), (a, b),
                 lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)))


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _make(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _lift(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward_fn)


# --- reductions and structure ----------------------------------------------

def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward_fn)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def cumsum(a: ArrayLike, axis: int = -1) -> Tensor:
    a = _lift(a)
    out = np.cumsum(a.values, axis=axis)
    return _make(out, (a,),
                 lambda g: (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def slice_(a: ArrayLike, index) -> Tensor:
    a = _lift(a)
    out = a.values[index]

    def backward_fn(g):
        full = np.zeros(a.shape)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(out, (a,), backward_fn)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = _lift(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Tuple[int, ...]) -> Tensor:
    a = _lift(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.values, b.values)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.values, -1, -2))
        gb = np.matmul(np.swapaxes(a.values, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward_fn)


def gru(x: ArrayLike, h0: ArrayLike, w_x: ArrayLike, w_h: ArrayLike,
        b_x: ArrayLike, b_h: ArrayLike) -> Tensor:
    """
    Fused GRU over a [B, L, d] sequence, returning the final hidden state [B, H].

    Gate layout along the 3H axis is (reset, update, candidate):

        r = sigmoid(x W_xr + b_xr + h W_hr + b_hr)
        z = sigmoid(x W_xz + b_xz + h W_hz + b_hz)
        n = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    x, h0, w_x, w_h, b_x, b_h = (_lift(t) for t in (x, h0, w_x, w_h, b_x, b_h))
    if x.ndim != 3:
        raise ShapeError(f"gru: expected a [B, L, d] sequence, got {x.shape}")
    B, L, d = x.shape
    H = w_h.shape[0]
    if w_x.shape != (d, 3 * H) or w_h.shape != (H, 3 * H) or h0.shape != (B, H):
        raise ShapeError(
            f"gru: input {x.shape}, h0 {h0.shape}, W_x {w_x.shape}, W_h {w_h.shape} "
            f"do not form a GRU with hidden size {H}"
        )
    if L < 1:
        raise ShapeError(f"gru: sequence length must be >= 1, got {x.shape}")

    gx = np.matmul(x.values, w_x.values) + b_x.values        # [B, L, 3H]
    h = h0.values
    cache = []
    for t in range(L):
        gh = h @ w_h.values + b_h.values
        rz = expit(gx[:, t, :2 * H] + gh[:, :2 * H])
        r, z = rz[:, :H], rz[:, H:]
        hn = gh[:, 2 * H:]
        n = np.tanh(gx[:, t, 2 * H:] + r * hn)
        cache.append((h, r, z, n, hn))
        h = (1.0 - z) * n + z * h

    def backward_fn(g):
        d_wx = np.zeros_like(w_x.values)
        d_wh = np.zeros_like(w_h.values)
        d_bx = np.zeros_like(b_x.values)
        d_bh = np.zeros_like(b_h.values)
        d_x = np.zeros_like(x.values)
        dh = g
        for t in range(L - 1, -1, -1):
            h_prev, r, z, n, hn = cache[t]
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dn_pre = dn * (1.0 - n ** 2)
            dr = dn_pre * hn
            dr_pre = dr * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            g_x = np.concatenate([dr_pre, dz_pre, dn_pre], axis=1)
            g_h = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
            d_wx += x.values[:, t, :].T @ g_x
            d_bx += g_x.sum(axis=0)
            d_wh += h_prev.T @ g_h
            d_bh += g_h.sum(axis=0)
            d_x[:, t, :] = g_x @ w_x.values.T
            dh = dh * z + g_h @ w_h.values.T
        return (d_x, dh, d_wx, d_wh, d_bx, d_bh)

    return _make(h, (x, h0, w_x, w_h, b_x, b_h), backward_fn)


# --- graph sweep ------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in visited:
            continue
        visited.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf that requires it."""
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = np.asarray(pg, dtype=np.float64)


# --- parameters and optimization --------------------------------------------

class ParamStore:
    """Named trainable tensors plus Adam moment slots."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.slots: Dict[str, Dict[str, np.ndarray]] = {'m': {}, 'v': {}}
        self.step = 0

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise InvalidParameterError(f"Duplicate parameter name: {name}")
        param = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = param
        return param

    def bind(self, name: str, tensor: Tensor) -> Tensor:
        """Register an existing tensor under ``name`` without copying it."""
        if name in self._params:
            raise InvalidParameterError(f"Duplicate parameter name: {name}")
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self._params.items()}

    def restore(self, values: Dict[str, np.ndarray]):
        for name, arr in values.items():
            if name not in self._params:
                raise InvalidParameterError(f"Unknown parameter in snapshot: {name}")
            if arr.shape != self._params[name].shape:
                raise ShapeError(f"{name}: snapshot shape {arr.shape} != {self._params[name].shape}")
            self._params[name].values = np.array(arr, dtype=np.float64)

    def copy(self) -> "ParamStore":
        clone = ParamStore()
        for name, p in self._params.items():
            clone.add(name, p.values)
        clone.slots = {k: {n: a.copy() for n, a in slot.items()} for k, slot in self.slots.items()}
        clone.step = self.step
        return clone

    def save(self, path):
        from .checkpoint import CheckpointCodec
        CheckpointCodec().write(path, {'params': self})

    @classmethod
    def load(cls, path) -> "ParamStore":
        from .checkpoint import CheckpointCodec
        return CheckpointCodec().read(path)['params']


def adam_step(params: ParamStore, lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8):
    """One Adam update over every parameter; gradients are cleared afterwards."""
    if all(p.grad is None for _, p in params.items()):
        raise StateError("adam_step called before any gradient was populated")
    beta1, beta2 = betas
    params.step += 1
    bias1 = 1.0 - beta1 ** params.step
    bias2 = 1.0 - beta2 ** params.step
    m_slot, v_slot = params.slots['m'], params.slots['v']
    for name, p in params.items():
        g = np.zeros_like(p.values) if p.grad is None else p.grad
        m = beta1 * m_slot.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * v_slot.get(name, 0.0) + (1.0 - beta2) * g * g
        m_slot[name], v_slot[name] = m, v
        p.values = p.values - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    params.zero_grad()


def grad_check(f: Callable[..., Tensor], point, step: float = 1e-5) -> float:
    """
    Largest relative gap between analytic and central-difference gradients.

    ``point`` is an array or a sequence of arrays; ``f`` receives one Tensor
    per array and returns a scalar Tensor.
    """
    if not step > 0:
        raise InvalidParameterError(f"Finite-difference step must be positive, got {step}")
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, (np.ndarray, float, int)) \
        else [np.array(p, dtype=np.float64) for p in point]
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*inputs)
    if out.size != 1:
        raise InvalidInputError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out)
    worst = 0.0
    with no_grad():
        for k, (tensor_in, base) in enumerate(zip(inputs, arrays)):
            analytic = np.zeros_like(base) if tensor_in.grad is None else tensor_in.grad
            for idx in np.ndindex(base.shape):
                plus = [a.copy() for a in arrays]
                minus = [a.copy() for a in arrays]
                plus[k][idx] += step
                minus[k][idx] -= step
                f_plus = f(*[Tensor(a) for a in plus]).item()
                f_minus = f(*[Tensor(a) for a in minus]).item()
                numeric = (f_plus - f_minus) / (2.0 * step)
                rel = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
                worst = max(worst, rel)
    return worst
