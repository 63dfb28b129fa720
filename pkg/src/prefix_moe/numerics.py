"""Dense float64 linear algebra with reverse-mode automatic differentiation.

Everything downstream (attention layers, gated mixtures, least-squares
fitting, the continual-learning harness) runs on the small `Tensor` engine
defined here.  Design constraints:

* 64-bit floats only; the equivalence checks in this project need ~1e-10
  agreement between independently computed quantities, which float32 cannot
  deliver.
* Row-major dense storage; problem sizes are a few dozen at most.
* Reproducible randomness via `Rng`, a thin wrapper over the Philox 4x64-10
  counter-based bit generator, so sample streams are identical across runs
  and platforms for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor",
    "Rng",
    "ShapeError",
    "NumericError",
    "ContractError",
    "as_tensor",
    "matmul",
    "transpose",
    "concat",
    "softmax_rows",
    "logsumexp_rows",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "gelu",
    "relu",
    "tsum",
    "tmean",
    "backward",
    "AdamState",
    "adam_step",
    "Adam",
    "central_difference",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """An operation received or produced non-finite values where finite
    output is part of the contract."""


class ContractError(ValueError):
    """A call violated a documented precondition other than shapes."""


def _asarray(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float64))


class Tensor:
    """A dense float64 array node in a reverse-mode computation graph.

    Tensors are treated as immutable after construction; the only sanctioned
    mutations are gradient accumulation during a backward pass and parameter
    updates applied by an optimizer between forward passes.  Read-only
    sharing across threads is safe.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _raise_not_scalar(self)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return _add(self, as_tensor(other))

    def __radd__(self, other):
        return _add(as_tensor(other), self)

    def __sub__(self, other):
        return _sub(self, as_tensor(other))

    def __rsub__(self, other):
        return _sub(as_tensor(other), self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    def __rmul__(self, other):
        return _mul(as_tensor(other), self)

    def __truediv__(self, other):
        return _div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return _div(as_tensor(other), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        return _pow(self, float(p))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Build a graph node; constant subgraphs carry no closure at all."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise binary -------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), back)


def _sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(data, (a, b), back)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), back)


def _div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def back(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), back)


def _neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g))


def _pow(a: Tensor, p: float) -> Tensor:
    data = a.data ** p

    def back(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _node(data, (a,), back)


def _getitem(a: Tensor, idx) -> Tensor:
    data = a.data[idx]

    def back(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _node(np.ascontiguousarray(data), (a,), back)


# matrix ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-d matrices, optionally stacked along a leading
    batch axis (numpy `@` semantics restricted to ndim <= 3)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul needs 2-d or stacked 3-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast_matmul(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast_matmul(gb, b.shape))

    return _node(data, (a, b), back)


def _unbroadcast_matmul(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    data = np.swapaxes(a.data, -1, -2)

    def back(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _node(np.ascontiguousarray(data), (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def back(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + n)
            _accumulate(t, g[tuple(index)])
            offset += n

    return _node(data, tuple(tensors), back)


# reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _node(data, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# elementwise nonlinearities -------------------------------------------------


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: _accumulate(a, g * data))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _node(data, (a,), lambda g: _accumulate(a, g * (1.0 - data * data)))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    return _node(data, (a,), lambda g: _accumulate(a, g * data * (1.0 - data)))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian-CDF form x * Phi(x), not the tanh approximation, so that
    independent recomputations agree to rounding."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    data = x * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        _accumulate(a, g * (cdf + x * pdf))

    return _node(data, (a,), back)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _node(data, (a,), lambda g: _accumulate(a, g * (a.data > 0.0)))


# softmax ------------------------------------------------------------------


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, computed with per-row max
    subtraction.  Each output row sums to 1 within 1e-12 and the result is
    invariant to adding a constant to a row."""
    a = as_tensor(a)
    if not np.isfinite(a.data).all():
        raise NumericError("softmax_rows received non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, data * (g - inner))

    return _node(data, (a,), back)


def logsumexp_rows(a: Tensor, keepdims: bool = True) -> Tensor:
    """Stable log(sum(exp(.))) over the last axis."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    data = m + np.log(s)
    soft = e / s
    if not keepdims:
        data = data[..., 0]

    def back(g):
        if not keepdims:
            g = g[..., None]
        _accumulate(a, g * soft)

    return _node(data, (a,), back)


# backward driver ----------------------------------------------------------


def backward(loss: Tensor):
    """Populate `.grad` on every tracked leaf reachable from `loss`.

    `loss` must be a scalar (size-1) tensor.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), t=0)


def adam_step(param, grad, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update.  Returns (new_param, new_state); inputs untouched."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise ShapeError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param, AdamState(m=m, v=v, t=t)


class Adam:
    """Adam over a list of leaf tensors; `step` consumes their `.grad`."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = [AdamState.zeros_like(p.data) for p in self.params]

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            p.data, self.state[i] = adam_step(
                p.data, p.grad, self.state[i], self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# randomness ---------------------------------------------------------------


class Rng:
    """Deterministic random stream backed by the Philox 4x64-10 counter-based
    generator (via numpy).  A given (seed, path) pair yields the same sample
    stream on every platform and run.  `child(i, j, ...)` derives statistically
    independent substreams, which keeps parallel trials reproducible
    regardless of scheduling order.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in _path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *indices: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(indices))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# finite differences -------------------------------------------------------


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array.

    Used by the verification CLI; tests carry their own independent copy so
    the check stays two-sided.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g
