"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that has a differentiable ancestor records
a node (parents + adjoint closure). ``loss.backward()`` walks the recorded graph
in reverse topological order and accumulates ``.grad`` on leaves that were
created with ``requires_grad=True``. The graph is rebuilt on every forward pass.

Broadcasting is deliberately narrow: equal shapes, scalar vs tensor, or a row
vector ``(n,)``/``(1, n)`` against an ``(m, n)`` matrix. Anything else raises.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphConsumedError",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "softplus",
    "sigmoid",
    "square",
    "sqrt",
    "scale",
    "power",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "transpose",
    "reshape",
    "reshape_col",
    "reshape_row",
    "logsumexp",
    "row_norm",
    "take_rows",
    "concat",
    "detach",
    "reparameterized_sample",
    "finite_difference_gradient",
    "no_grad",
]


class GraphConsumedError(RuntimeError):
    """Raised when ``backward`` is replayed on a graph that was already used."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """A float64 array that can participate in a gradient graph.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: mark as a differentiable leaf.
        allow_nonfinite: skip the NaN/Inf check (diagnostics only).
        name: optional label, used by checkpoints and error messages.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, allow_nonfinite: bool = False,
                 name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        if not allow_nonfinite and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite entries in tensor{' ' + name if name else ''}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    # construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._consumed = False
        track = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # backward -------------------------------------------------------------

    def backward(self, grad: np.ndarray | float | None = None) -> int:
        """Propagate adjoints from this node to every reachable leaf.

        Returns the number of graph nodes that received an adjoint. A graph can
        be replayed only once; a second call raises :class:`GraphConsumedError`.
        """
        if self._consumed:
            raise GraphConsumedError("backward already ran on this graph; re-run the forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            seed = np.ones_like(self.data)
        else:
            seed = np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()

        root_is_op = self._backward is not None
        order = _topological_order(self)
        adjoints: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg
        for node in order:
            if node._backward is not None:
                node._consumed = True
                node._backward = None
                node._parents = ()
        if root_is_op:
            self._consumed = True
        return len(order)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return _slice(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._consumed and node is not root:
            raise GraphConsumedError("graph contains nodes already consumed by a previous backward")
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# broadcasting ---------------------------------------------------------------

def _check_broadcast(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    sa, sb = int(np.prod(a)), int(np.prod(b))
    if sa == 1 and len(a) <= len(b):
        return b
    if sb == 1 and len(b) <= len(a):
        return a
    for row, mat in ((a, b), (b, a)):
        if len(mat) == 2 and (row == (mat[1],) or row == (1, mat[1])):
            return mat
    raise ValueError(f"shapes {a} and {b} are not broadcast-compatible "
                     "(only scalar and row-vector broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.sum(g).reshape(shape)
    # row vector against matrix
    return g.sum(axis=0).reshape(shape)


# binary elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b),
                           lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("division by zero entry")
    out = ad / bd
    return Tensor._from_op(out, (a, b),
                           lambda g: (_unbroadcast(g / bd, ad.shape),
                                      _unbroadcast(-g * out / bd, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# unary elementwise ----------------------------------------------------------

def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive entry")
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return Tensor._from_op(out, (a,), lambda g: (g * _sigmoid(ad),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative entry")
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * 0.5 / out,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return Tensor._from_op(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; the adjoint is zero where the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor._from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# reductions -----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = np.sum(a.data, axis=ax)

    def back(g):
        if ax is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (a,), back)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.data.size if ax is None else a.shape[ax]
    if n == 0:
        raise ValueError("mean over an empty axis")
    return scale(reduce_sum(a, ax), 1.0 / n)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    m = np.max(a.data, axis=ax, keepdims=True)
    shifted = np.exp(a.data - m)
    s = np.sum(shifted, axis=ax, keepdims=True)
    out = (np.log(s) + m).squeeze(ax)
    soft = shifted / s
    return Tensor._from_op(out, (a,), lambda g: (np.expand_dims(g, ax) * soft,))


def row_norm(a) -> Tensor:
    """Euclidean norm of each row; the adjoint at a zero row is taken as zero."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("row_norm expects a matrix")
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=1))

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        return ((g / safe * (out > 0))[:, None] * ad,)

    return Tensor._from_op(out, (a,), back)


# structural -----------------------------------------------------------------

def transpose(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def reshape_col(a) -> Tensor:
    return reshape(a, (-1, 1))


def reshape_row(a) -> Tensor:
    return reshape(a, (1, -1))


def take_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._from_op(a.data[idx], (a,), back)


def _slice(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return Tensor._from_op(a.data[idx].copy(), (a,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = _norm_axis(axis, ts[0].ndim)
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), ts,
                           lambda g: tuple(np.split(g, splits, axis=ax)))


def detach(a) -> Tensor:
    """Same value, cut from the graph: no adjoint reaches ``a`` through the result."""
    a = as_tensor(a)
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out._consumed = False
    return out


def reparameterized_sample(mu, logvar, eps) -> Tensor:
    """``mu + exp(logvar / 2) * eps`` with ``eps`` supplied by the caller."""
    mu, logvar, eps = as_tensor(mu), as_tensor(logvar), as_tensor(eps)
    if not (mu.shape == logvar.shape == eps.shape):
        raise ValueError(f"shape mismatch: mu {mu.shape}, logvar {logvar.shape}, eps {eps.shape}")
    return mu + exp(scale(logvar, 0.5)) * eps


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
