"""Small reverse-mode autodiff over float64 numpy arrays.

Only what the MIL losses need: affine maps, elementwise nonlinearities,
row gathers, softmax, row normalization, top-k means and reductions.
Every op records its parents and a closure that pushes the upstream
gradient back; :meth:`Tensor.backward` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None) -> None:
        """Propagate d(self)/d(leaf) into every leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return mul(self, 1.0 / other) if not isinstance(other, Tensor) else div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _backward=backward if req else None)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ b.data.T if b.data.ndim == 2 else np.multiply.outer(g, b.data)
        if a.data.ndim == 2:
            gb = a.data.T @ g
        else:
            gb = np.multiply.outer(a.data, g)
        return ga, gb

    return _node(a.data @ b.data, (a, b), back)


def affine(x, W, b) -> Tensor:
    """Row-wise ``x @ W + b`` for ``x[n, d]``, ``W[d, m]``, ``b[m]``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"affine: x {x.shape}, W {W.shape}, b {b.shape} do not agree")
    out = x.data @ W.data + b.data

    def back(g):
        return g @ W.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(out, (x, W, b), back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # branchless stable form: exp never sees a positive argument
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where clamped."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def hinge(x) -> Tensor:
    """``max(0, x)``. Same as relu, kept separate for readability at call sites."""
    return relu(x)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _node(out, (x,), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / count)


def take(x, idx) -> Tensor:
    """Gather ``x[idx]`` (integer index, slice or index array along axis 0)."""
    x = as_tensor(x)
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, (x,), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.T, (x,), lambda g: (g.T,))


def concat(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def logsumexp(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis)
    soft = shifted / total
    return _node(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = shifted / shifted.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), back)


def l2_normalize(v, axis=-1, eps: float | None = None) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``.

    Zero vectors raise unless ``eps`` is given, in which case norms are
    clamped below at ``eps`` (so a zero vector maps to zero).
    """
    v = as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    if eps is None and np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: zero vector has no direction")
    clamped = norm < eps if eps is not None else np.zeros_like(norm, dtype=bool)
    norm = np.where(clamped, eps if eps is not None else 1.0, norm)
    u = v.data / norm

    def back(g):
        radial = np.where(clamped, 0.0, (g * u).sum(axis=axis, keepdims=True))
        return ((g - u * radial) / norm,)

    return _node(u, (v,), back)


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` largest values, descending, ties to the lowest index."""
    values = np.asarray(values)
    k = min(int(k), values.shape[0])
    # stable sort on the negated values keeps equal entries in index order
    return np.argsort(-values, kind="stable")[:k]


def top_k_mean(x, k: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 1 or x.shape[0] == 0:
        raise DimensionError(f"top_k_mean needs a nonempty vector, got shape {x.shape}")
    if k < 1:
        raise ValueError("k must be >= 1")
    return mean(take(x, top_k_indices(x.data, k)))


class Adam:
    """Adam over a list of leaf tensors, updated in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


def grad_check(scalar_fn: Callable[..., Tensor], params: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients with central differences.

    ``scalar_fn`` receives one :class:`Tensor` per entry of ``params`` and
    must return a scalar tensor. Returns the max over all coordinates of
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    arrays = [np.array(p, dtype=np.float64, copy=True) for p in params]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = scalar_fn(*leaves)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("grad_check: loss is not finite at the base point")
    out.backward()
    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(base)
        flat = base.reshape(-1)
        for j in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[i].reshape(-1)[j] += sign * eps
                v = scalar_fn(*(Tensor(p) for p in probe)).item()
                if not np.isfinite(v):
                    raise NonFiniteError(f"grad_check: loss not finite at param {i}, coord {j}")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
