"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every ``Tensor`` is also a graph node: it keeps its parents and a backward
closure when it was produced by a differentiable operation on inputs that
require gradients.  ``backward`` replays the recorded nodes in reverse
creation order, which is a valid reverse topological order because a node is
always created after its parents.

Broadcasting is deliberately restricted to scalar operands; anything else must
be spelled out with :func:`broadcast_to`.
"""
from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "DomainError", "GradcheckError", "tensor",
    "constant", "make_node", "no_grad", "is_grad_enabled", "matmul",
    "softmax", "log_softmax", "reduce_mean", "reduce_sum", "elementwise",
    "exp", "log", "neg", "add", "sub", "mul", "div", "sqrt", "square",
    "tanh", "sigmoid", "absolute", "clamp_min", "transpose", "reshape",
    "concat", "stack", "broadcast_to", "take_rows", "pick", "backward",
    "gradcheck", "GradcheckReport",
]

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's mathematical domain."""


class GradcheckError(RuntimeError):
    """Raised when a finite-difference probe produces a non-finite loss."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording graph nodes (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ----------------------------------------------------
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

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a differentiable operation.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per
    parent, each shaped like that parent.  No graph edge is recorded when
    grad mode is off or no parent needs a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# binary elementwise ops (equal shapes or scalar operand)
# ---------------------------------------------------------------------------

def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0 or t.shape == (1,)


def _binary_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b):
        return a.shape
    if _is_scalar(a):
        return b.shape
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not equal and neither is a scalar")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.full(t.shape, g.sum())


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return make_node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return make_node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return make_node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _binary_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        gb = g / b.data
        return _unbroadcast(gb, a), _unbroadcast(-gb * out, b)

    return make_node(out, (a, b), bw)


# ---------------------------------------------------------------------------
# unary elementwise ops
# ---------------------------------------------------------------------------

def neg(x) -> Tensor:
    x = constant(x)
    return make_node(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = constant(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = constant(x)
    if np.any(~(x.data > 0.0)):
        raise DomainError("log: input must be strictly positive")
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = constant(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0.0, g / (2.0 * out), 0.0),)

    return make_node(out, (x,), bw)


def square(x) -> Tensor:
    x = constant(x)
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tanh(x) -> Tensor:
    x = constant(x)
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = constant(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def absolute(x) -> Tensor:
    x = constant(x)
    return make_node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp_min(x, lo: float) -> Tensor:
    """max(x, lo); the gradient passes only where x > lo."""
    x = constant(x)
    keep = x.data > lo
    return make_node(np.where(keep, x.data, lo), (x,), lambda g: (np.where(keep, g, 0.0),))


_UNARY = {"exp": exp, "log": log, "neg": neg, "sqrt": sqrt, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(x, f: str, y=None) -> Tensor:
    """Dispatch a named pointwise function; binary names need ``y``."""
    if f in _UNARY:
        if y is not None:
            raise TypeError(f"{f} is unary")
        return _UNARY[f](x)
    if f in _BINARY:
        if y is None:
            raise TypeError(f"{f} needs a second operand")
        return _BINARY[f](x, y)
    raise ValueError(f"unknown elementwise function {f!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain matrix shared
    across the batch or has the same leading axes as ``a``.
    """
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make_node(a.data @ b.data, (a, b), bw)


def transpose(x, axes=None) -> Tensor:
    x = constant(x)
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = constant(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return make_node(out, (x,), lambda g: (g.reshape(src),))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} is invalid for a {ndim}-D tensor")
    return axis % ndim


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim),)
    return tuple(sorted(_norm_axis(a, ndim) for a in axis))


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    axes = _norm_axes(axis, x.ndim)
    src = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return make_node(x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = constant(x)
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(f"reduce_mean: zero-extent reduction over shape {x.shape}")
    src = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src).copy(),)

    return make_node(x.data.mean(axis=axes, keepdims=keepdims), (x,), bw)


def broadcast_to(x, shape) -> Tensor:
    """Explicit numpy-style broadcast; the gradient sums over expanded axes."""
    x = constant(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    src = x.shape

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_node(out.copy(), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = _norm_axis(axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {ax}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_node(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ShapeError(f"stack: shapes {ts[0].shape} and {t.shape} differ")
    ax = _norm_axis(axis, ts[0].ndim + 1)

    def bw(g):
        return tuple(np.moveaxis(g, ax, 0))

    return make_node(np.stack([t.data for t in ts], axis=ax), ts, bw)


def _getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(out, dtype=np.float64), (x,), bw)


def take_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` may have any integer shape."""
    table = constant(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: ids outside [0, {table.shape[0]})")

    def bw(g):
        full = np.zeros(table.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return make_node(table.data[ids], (table,), bw)


def pick(x, idx) -> Tensor:
    """Gather one entry of the last axis per leading position: ``x[..., idx[...]]``."""
    x = constant(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# normalized exponentials
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax.  ``mask`` (broadcastable bool, True = keep) drops entries."""
    x = constant(x)
    ax = _norm_axis(axis, x.ndim)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if np.any(~mask.any(axis=ax)):
            raise ValueError("softmax: every position of a row is masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return make_node(out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = constant(x)
    ax = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Fill ``.grad`` of every node reachable from ``root`` with d(root)/d(node).

    Gradients are recomputed from zero on each call, so repeating a call
    yields the same values rather than accumulating.
    """
    if root.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack_ = [root]
    while stack_:
        n = stack_.pop()
        if id(n) in nodes:
            continue
        nodes[id(n)] = n
        stack_.extend(p for p in n._parents if p.requires_grad)
    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    for n in order:
        if n.grad is None or n.grad.shape != n.shape:
            n.grad = np.zeros(n.shape)
        else:
            n.grad[...] = 0.0
    root.grad[...] = 1.0
    for n in order:
        if n._backward is None:
            continue
        grads = n._backward(n.grad)
        for p, g in zip(n._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"backward rule produced {g.shape} for parent {p.shape}")
            p.grad += g


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.per_param.items() if v > self.tol]

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.worst_param}{list(self.worst_index)}" if self.worst_param else ""
        return f"{status} max_rel_err={self.max_rel_error:.3e}{where}"


def _as_named(params) -> dict[str, Tensor]:
    if isinstance(params, dict):
        return dict(params)
    return {p.name or f"param{i}": p for i, p in enumerate(params)}


def gradcheck(loss_builder: Callable, params, step: float = 1e-5, tol: float = 1e-4,
              entries: dict[str, Iterable[tuple[int, ...]]] | None = None) -> GradcheckReport:
    """Compare autodiff gradients against central differences.

    ``loss_builder(params)`` must rebuild the scalar loss from the current
    values of ``params`` (a dict name -> Tensor or a sequence of Tensors).
    The error per entry is ``|a - f| / max(1e-8, |a| + |f|)``.  ``entries``
    optionally restricts the probe to listed indices per parameter.
    """
    if step <= 0:
        raise ValueError("gradcheck: step must be positive")
    named = _as_named(params)
    for p in named.values():
        if not p.requires_grad:
            p.requires_grad = True
            p.grad = np.zeros(p.shape)
    loss = loss_builder(params)
    backward(loss)
    analytic = {k: p.grad.copy() for k, p in named.items()}

    per_param: dict[str, float] = {}
    worst, worst_name, worst_idx = 0.0, None, None
    with no_grad():
        for name, p in named.items():
            idxs = entries.get(name) if entries and name in entries else np.ndindex(*p.shape)
            pmax = 0.0
            for idx in idxs:
                orig = p.data[idx]
                try:
                    p.data[idx] = orig + step
                    fp = loss_builder(params).item()
                    p.data[idx] = orig - step
                    fm = loss_builder(params).item()
                except (ValueError, FloatingPointError) as exc:
                    raise GradcheckError(f"loss undefined probing {name}{list(idx)}: {exc}") from exc
                finally:
                    p.data[idx] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise GradcheckError(f"non-finite loss probing {name}{list(idx)}")
                f = (fp - fm) / (2.0 * step)
                a = analytic[name][idx]
                err = abs(a - f) / max(1e-8, abs(a) + abs(f))
                if err > pmax:
                    pmax = err
                if err > worst:
                    worst, worst_name, worst_idx = err, name, tuple(int(i) for i in np.atleast_1d(idx))
            per_param[name] = pmax
    return GradcheckReport(worst, worst <= tol, worst_name, worst_idx, per_param, tol)
