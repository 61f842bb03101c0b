"""Dense float64 tensors with reverse-mode differentiation.

Each op returns a new :class:`Tensor`; when any input requires a gradient the
result remembers its parents and a closure that maps the output gradient to
input gradients. :func:`backward` orders those records into a :class:`Tape`
and replays it in reverse.

Every :func:`matmul` reports ``m*k*n`` multiply-adds to a per-thread
:class:`FlopCounter`. Nothing else is counted: elementwise work, softmax,
layernorm and gathers are free by convention.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class FlopCounter:
    """Running count of scalar multiply-adds executed by matmul."""

    def __init__(self) -> None:
        self.mul_adds = 0

    def add(self, n: int) -> None:
        self.mul_adds += int(n)

    def reset(self) -> None:
        self.mul_adds = 0


class _ThreadState(threading.local):
    def __init__(self) -> None:
        self.counter = FlopCounter()
        self.grad_enabled = True


_state = _ThreadState()


def flop_counter() -> FlopCounter:
    """The calling thread's counter."""
    return _state.counter


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(op, x.shape, detail=f"axis {axis} out of range")
    return axis % x.ndim


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _wrap(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _wrap(data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _wrap(data, (a, b), grad_fn, "mul")


def keep(x: Tensor, where: np.ndarray) -> Tensor:
    """Zero every entry where the (broadcastable) boolean ``where`` is False.

    Unlike multiplying by a 0/1 mask this never produces ``-0.0``.
    """
    where = np.broadcast_to(np.asarray(where, dtype=bool), x.shape)
    return _wrap(np.where(where, x.data, 0.0), (x,), lambda g: (np.where(where, g, 0.0),), "keep")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _wrap(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k) x (k,n) -> (m,n); counts m*k*n multiply-adds."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    m, k = a.shape
    n = b.shape[1]
    _state.counter.add(m * k * n)
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def grad_fn(g):
        return (g @ bd.T if need_a else None), (ad.T @ g if need_b else None)

    return _wrap(ad @ bd, (a, b), grad_fn, "matmul")


# ----------------------------------------------------------------- structure


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape, detail="expects rank 2")
    return _wrap(x.data.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.data.size:
        raise ShapeError("reshape", x.shape, shape)
    src = x.shape
    return _wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    axis = _check_axis("concat", tensors[0], axis)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _wrap(data, tensors, grad_fn, "concat")


def slice(x: Tensor, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    """Rows/columns ``[start, stop)`` along ``axis``."""
    axis = _check_axis("slice", x, axis)
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError("slice", x.shape, detail=f"range [{start}, {stop}) on axis {axis}")
    idx = [np.s_[:]] * x.ndim
    idx[axis] = np.s_[start:stop]
    idx = tuple(idx)
    src = x.shape

    def grad_fn(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return _wrap(x.data[idx], (x,), grad_fn, "slice")


def take_rows(table: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    idx = np.asarray(index, dtype=np.int64).reshape(-1)
    if table.ndim != 2:
        raise ShapeError("take_rows", table.shape, detail="expects rank 2")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for table with {table.shape[0]} rows")
    src = table.shape

    def grad_fn(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _wrap(table.data[idx], (table,), grad_fn, "take_rows")


def maximum(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise max over same-shape tensors.

    The gradient goes to the first operand attaining the max, so ties resolve
    to the lowest position in ``tensors``.
    """
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("maximum", shape, t.shape)
    stack = np.stack([t.data for t in tensors])
    winner = np.argmax(stack, axis=0)

    def grad_fn(g):
        return tuple(np.where(winner == i, g, 0.0) for i in range(len(tensors)))

    return _wrap(stack.max(axis=0), tensors, grad_fn, "maximum")


# --------------------------------------------------------------- nonlinear

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _wrap(out, (x,), grad_fn, "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax.

    ``-inf`` inputs get exactly zero weight. A slice that is entirely ``-inf``
    yields all zeros instead of NaN.
    """
    axis = _check_axis("softmax", x, axis)
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True) if xd.size else np.zeros(xd.shape)
    dead = np.isneginf(m)
    e = np.exp(xd - np.where(dead, 0.0, m))
    s = e.sum(axis=axis, keepdims=True)
    p = np.where(dead, 0.0, e / np.where(dead, 1.0, s))

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _wrap(p, (x,), grad_fn, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; a constant row maps to ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layernorm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gain.data

    def grad_fn(g):
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        dxhat = g * gd
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _wrap(xhat * gd + bias.data, (x, gain, bias), grad_fn, "layernorm")


# -------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001
    shape = x.shape
    return _wrap(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = max(x.data.size, 1)
    shape = x.shape
    return _wrap(
        np.array(x.data.sum() / n), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def cross_entropy(logits: Tensor, rows: Sequence[int], targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``targets[i]`` under softmax(logits[rows[i]])."""
    rows = np.asarray(rows, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or rows.shape != targets.shape or rows.size == 0:
        raise ShapeError("cross_entropy", logits.shape, rows.shape, targets.shape)
    z = logits.data[rows]
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(s)
    n = rows.size
    loss = -logp[np.arange(n), targets].mean()
    src = logits.shape

    def grad_fn(g):
        d = e / s
        d[np.arange(n), targets] -= 1.0
        full = np.zeros(src)
        np.add.at(full, rows, d * (g / n))
        return (full,)

    return _wrap(np.array(loss), (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------- backward


class Tape:
    """Operations reachable from ``loss`` in topological order (inputs first)."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.ops: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.ops.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))

    def run(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.loss): np.ones(self.loss.shape)}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape(loss).run()


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
