"""Dense numpy tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
input requires a gradient; outside a tape every op is a plain numpy call, which
is what inference uses.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = sum_(x * x)
    >>> backward(loss)
    >>> x.grad
    array([[2., 4.]], dtype=float32)
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ShapeError, StateError, ValidationError

__all__ = [
    "Tensor", "Tape", "backward", "no_grad", "precision", "get_default_dtype",
    "add", "sub", "mul", "scale", "neg", "exp", "log", "sum_", "mean",
    "matmul", "transpose", "reshape", "concat", "stack", "index", "embedding",
    "masked_fill", "causal_mask", "softmax", "log_softmax", "layer_norm",
    "gelu", "cross_entropy", "kl_div", "detach", "argmax", "topk_indices",
]

_state = threading.local()
_default_dtype = np.float32

KL_FLOOR = 1e-12


def get_default_dtype() -> np.dtype:
    return np.dtype(getattr(_state, "dtype", _default_dtype))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for tensors built from python data."""
    prev = getattr(_state, "dtype", _default_dtype)
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on every active tape."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    """A numpy array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; use mul and exp/log")
        return scale(self, 1.0 / other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Node:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside it are appended in execution
    order, which is already a topological order of the graph.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t._tape is not self:
                self._leaves[id(t)] = t
        output._tape = self
        self.nodes.append(_Node(output, inputs, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss._tape is not self:
            raise StateError("loss was not produced on this tape")
        for node in self.nodes:
            node.output.grad = None
        for leaf in self._leaves.values():
            leaf.grad = None
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        for key, g in grads.items():
            leaf = self._leaves.get(key)
            if leaf is not None:
                leaf.grad = g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires one and reaches ``loss``.

    Re-running on the same tape recomputes from scratch rather than accumulating.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if not loss.requires_grad:
            raise StateError("loss does not depend on any tensor that requires grad")
        raise StateError("loss was computed outside an active Tape")
    loss._tape.backward(loss)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor._wrap(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if any(t.requires_grad for t in inputs):
        stack = _tape_stack()
        if stack:
            out.requires_grad = True
            stack[-1].record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    c = x.dtype.type(math.sqrt(2.0 / math.pi))
    a = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    xd = x.data
    t = np.tanh(c * (xd + a * (xd * xd * xd)))
    out = half * xd * (1 + t)

    def bw(g):
        dt = (1 - t * t) * c * (1 + 3 * a * xd * xd)
        return (g * (half * (1 + t) + half * xd * dt),)

    return _result(out, (x,), bw)


def detach(x: Tensor) -> Tensor:
    return Tensor._wrap(x.data)


# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(np.matmul(a.data, b.data), (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=axis), xs,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _result(np.stack([t.data for t in xs], axis=axis), xs, bw)


def index(x: Tensor, key) -> Tensor:
    """Basic or advanced indexing; the backward scatters with ``np.add.at``."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, key, g)
        return (out,)

    return _result(np.asarray(x.data[key]), (x,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValidationError(f"embedding id out of range [0, {weight.shape[0]})")

    def bw(g):
        out = np.zeros(weight.shape, dtype=g.dtype)
        np.add.at(out, ids, g)
        return (out,)

    return _result(weight.data[ids], (weight,), bw)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _result(out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype, copy=False),))


def causal_mask(scores: Tensor) -> Tensor:
    """Set entries above the diagonal of the last two axes to -inf."""
    t, s = scores.shape[-2:]
    future = np.triu(np.ones((t, s), dtype=bool), k=1 + s - t)
    return masked_fill(scores, future, -np.inf)


# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValidationError("softmax row has no finite entry")
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _result(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw)


def _row_mask(mask, lead_shape) -> np.ndarray:
    if mask is None:
        return np.ones(lead_shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(lead_shape):
        raise ShapeError(f"mask shape {mask.shape} != {tuple(lead_shape)}")
    return mask


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over unmasked rows."""
    targets = np.asarray(targets)
    lead, v = logits.shape[:-1], logits.shape[-1]
    if targets.shape != lead:
        raise ShapeError(f"targets shape {targets.shape} != logits rows {lead}")
    keep = _row_mask(mask, lead)
    count = int(keep.sum())
    if count == 0:
        raise ValidationError("cross_entropy over an all-masked batch")
    sel = targets[keep]
    if sel.size and (sel.min() < 0 or sel.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    safe_t = np.where(keep, targets, 0)
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = np.take_along_axis(z, safe_t[..., None], axis=-1)[..., 0]
    nll = np.where(keep, lse - picked, 0)
    out = np.asarray(nll.sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, safe_t[..., None],
                          np.take_along_axis(p, safe_t[..., None], axis=-1) - 1, axis=-1)
        p *= (keep[..., None] * (g / count)).astype(p.dtype)
        return (p,)

    return _result(out, (logits,), bw)


def kl_div(p: Tensor, q: Tensor, mask=None) -> Tensor:
    """Mean over unmasked rows of sum_v p ln(p/q), in nats.

    Terms with p == 0 contribute nothing; q is floored at 1e-12.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_div shapes differ: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or not np.allclose(t.data.sum(axis=-1), 1.0, rtol=0, atol=1e-5):
            raise ValidationError(f"kl_div: rows of {name} are not probability vectors")
    keep = _row_mask(mask, p.shape[:-1])
    count = int(keep.sum())
    if count == 0:
        raise ValidationError("kl_div over an all-masked batch")
    floor = p.dtype.type(KL_FLOOR)
    qf = np.maximum(q.data, floor)
    pos = p.data > 0
    logp = np.log(np.where(pos, p.data, 1))
    logq = np.log(qf)
    terms = np.where(pos, p.data * (logp - logq), 0)
    rows = terms.sum(axis=-1)
    out = np.asarray(np.where(keep, rows, 0).sum() / count, dtype=p.dtype)

    def bw(g):
        w = (keep[..., None] * (g / count)).astype(p.dtype)
        gp = gq = None
        if p.requires_grad:
            lp = np.log(np.maximum(p.data, floor))
            gp = (lp - logq + 1) * w
        if q.requires_grad:
            gq = np.where(q.data >= floor, -p.data / qf, 0) * w
        return gp, gq

    return _result(out, (p, q), bw)


# non-differentiable helpers


def argmax(x, axis: int = -1) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=axis)


def topk_indices(x, k: int, axis: int = -1, prefer_high: bool = True) -> np.ndarray:
    """Indices of the ``k`` largest entries along ``axis``, best first.

    Ties go to the higher index when ``prefer_high`` (else the lower one).
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    data = np.moveaxis(data, axis, -1)
    n = data.shape[-1]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} outside [1, {n}]")
    if prefer_high:
        order = np.argsort(-data[..., ::-1], axis=-1, kind="stable")[..., :k]
        order = n - 1 - order
    else:
        order = np.argsort(-data, axis=-1, kind="stable")[..., :k]
    return np.moveaxis(order, -1, axis)
