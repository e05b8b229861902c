"""Dense tensors with reverse-mode automatic differentiation.

A module-level tape records every primitive applied to tensors that require
gradients; ``backward`` replays the tape in reverse execution order (a valid
reverse topological order, since inputs always exist before their consumers)
and accumulates gradients on the leaves.

Shape discipline is strict: apart from python-scalar operands, operand shapes
must match exactly. The one sanctioned broadcast is ``add_bias`` (a trailing-
axis vector added across leading axes), which has its own backward rule.

Precision: float64 by default (gradient checks need the headroom); call
``set_default_dtype(np.float32)`` to trade accuracy for speed in training.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_TAPE: list["_Node"] = []

# Cross-entropy floors probabilities here so float32 underflow cannot emit inf.
_CE_PROB_FLOOR = 1e-30
_DIST_FLOOR = 1e-12


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    named = {"float32": np.float32, "float64": np.float64}
    dtype = named.get(dtype, dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use np.float32 or np.float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense float array plus its accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with no history; gradients stop here."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: Tensor, backward):
        self.out = out
        self.backward = backward


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def tape_length() -> int:
    return len(_TAPE)


def reset_tape() -> None:
    _TAPE.clear()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(*tensors) -> bool:
    return _GRAD_ENABLED and any(
        isinstance(t, Tensor) and t.requires_grad for t in tensors
    )


def _record(out: Tensor, backward) -> Tensor:
    out.requires_grad = True
    _TAPE.append(_Node(out, backward))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = g.astype(t.dtype, copy=True) if g.dtype != t.dtype else g.copy()
        else:
            t.grad += g


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded tape.

    Every reachable tensor with requires_grad receives its accumulated
    gradient in ``.grad`` (summed into any gradient already there). The tape
    is consumed; intermediate gradients are freed with it.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE):
        g = node.out.grad
        if g is not None:
            node.backward(g)
            node.out.grad = None
    _TAPE.clear()


# ---------------------------------------------------------------------------
# primitives


def _match(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) or isinstance(a, (int, float)):
        if isinstance(a, (int, float)):
            a, b = b, a
        a = _as_tensor(a)
        s = a.dtype.type(b)
        out = Tensor(a.data + s)
        if _tracks(a):

            def bw(g, a=a):
                _accum(a, g)

            return _record(out, bw)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    _match(a, b, "add")
    out = Tensor(a.data + b.data)
    if _tracks(a, b):

        def bw(g, a=a, b=b):
            _accum(a, g)
            _accum(b, g)

        return _record(out, bw)
    return out


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -b)
    a, b = _as_tensor(a), _as_tensor(b)
    _match(a, b, "sub")
    out = Tensor(a.data - b.data)
    if _tracks(a, b):

        def bw(g, a=a, b=b):
            _accum(a, g)
            _accum(b, -g)

        return _record(out, bw)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    if _tracks(a):

        def bw(g, a=a):
            _accum(a, -g)

        return _record(out, bw)
    return out


def mul(a, b) -> Tensor:
    if isinstance(a, (int, float)):
        a, b = b, a
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        s = a.dtype.type(b)
        out = Tensor(a.data * s)
        if _tracks(a):

            def bw(g, a=a, s=s):
                _accum(a, g * s)

            return _record(out, bw)
        return out
    a, b = _as_tensor(a), _as_tensor(b)
    _match(a, b, "mul")
    out = Tensor(a.data * b.data)
    if _tracks(a, b):

        def bw(g, a=a, b=b):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return _record(out, bw)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if _tracks(a, b):

        def bw(g, a=a, b=b):
            _accum(a, g @ b.data.T)
            _accum(b, a.data.T @ g)

        return _record(out, bw)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)
    if _tracks(x):

        def bw(g, x=x, y=y, axis=axis):
            dot = np.sum(g * y, axis=axis, keepdims=True)
            _accum(x, y * (g - dot))

        return _record(out, bw)
    return out


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.log(x.data))
    if _tracks(x):

        def bw(g, x=x):
            _accum(x, g / x.data)

        return _record(out, bw)
    return out


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    out = Tensor(y)
    if _tracks(x):

        def bw(g, x=x, y=y):
            _accum(x, g * y)

        return _record(out, bw)
    return out


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    if _tracks(x):
        mask = x.data > 0

        def bw(g, x=x, mask=mask):
            _accum(x, g * mask)

        return _record(out, bw)
    return out


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    out = Tensor(y)
    if _tracks(x):

        def bw(g, x=x, y=y):
            _accum(x, g * (1.0 - y * y))

        return _record(out, bw)
    return out


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y)
    if _tracks(x):

        def bw(g, x=x, y=y):
            _accum(x, g * y * (1.0 - y))

        return _record(out, bw)
    return out


def max_pool_over_axis(x, axis: int) -> Tensor:
    """Max over one axis. Ties route the gradient to the first maximal index."""
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError(f"max_pool over empty axis {axis} of shape {x.shape}")
    idx = np.argmax(x.data, axis=axis)
    out = Tensor(np.max(x.data, axis=axis))
    if _tracks(x):

        def bw(g, x=x, idx=idx, axis=axis):
            gx = np.zeros_like(x.data)
            expanded = np.expand_dims(idx, axis)
            np.put_along_axis(gx, expanded, np.expand_dims(g, axis), axis)
            _accum(x, gx)

        return _record(out, bw)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    if _tracks(*ts):
        sizes = [t.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def bw(g, ts=ts, offsets=offsets, axis=axis):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

        return _record(out, bw)
    return out


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` (n_rows, d) by an integer array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = Tensor(table.data[ids])
    if _tracks(table):

        def bw(g, table=table, ids=ids):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            _accum(table, gt)

        return _record(out, bw)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)
    if _tracks(x, gain, bias):

        def bw(g, x=x, gain=gain, bias=bias, xhat=xhat, inv=inv, d=d):
            lead = tuple(range(g.ndim - 1))
            _accum(bias, g.sum(axis=lead) if lead else g.copy())
            _accum(gain, (g * xhat).sum(axis=lead) if lead else g * xhat)
            dxhat = g * gain.data
            m1 = np.mean(dxhat, axis=-1, keepdims=True)
            m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

        return _record(out, bw)
    return out


def cross_entropy(probs, targets, reduction: str = "mean") -> Tensor:
    """Negative log probability of the target class per row.

    ``probs`` is (n, V) with rows summing to 1 (e.g. a softmax output) and
    ``targets`` an (n,) integer array. Probabilities are floored at 1e-30 so
    a fully-confident wrong prediction yields a large finite loss. Reduction
    is "mean", "sum", or "none".
    """
    probs = _as_tensor(probs)
    targets = np.asarray(targets)
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, V) probs, got {probs.shape}")
    if targets.shape != (probs.shape[0],):
        raise ShapeError(
            f"cross_entropy: {probs.shape[0]} rows but targets shape {targets.shape}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise IndexError("cross_entropy target id out of range")
    rows = np.arange(probs.shape[0])
    p = np.maximum(probs.data[rows, targets], _CE_PROB_FLOOR)
    losses = -np.log(p)
    if reduction == "mean":
        out = Tensor(losses.mean())
    elif reduction == "sum":
        out = Tensor(losses.sum())
    elif reduction == "none":
        out = Tensor(losses)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    if _tracks(probs):

        def bw(g, probs=probs, rows=rows, targets=targets, p=p, reduction=reduction):
            gp = np.zeros_like(probs.data)
            if reduction == "mean":
                per = np.broadcast_to(g / len(rows), rows.shape)
            elif reduction == "sum":
                per = np.broadcast_to(g, rows.shape)
            else:
                per = g
            np.add.at(gp, (rows, targets), -per / p)
            _accum(probs, gp)

        return _record(out, bw)
    return out


def euclidean_distance(x, y) -> Tensor:
    """L2 distance. 1-D inputs give a scalar; (n, d) inputs give per-row (n,)."""
    x, y = _as_tensor(x), _as_tensor(y)
    _match(x, y, "euclidean_distance")
    diff = x.data - y.data
    if x.ndim == 1:
        dist = np.sqrt(np.sum(diff * diff))
    elif x.ndim == 2:
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
    else:
        raise ShapeError(f"euclidean_distance expects 1-D or 2-D, got {x.shape}")
    out = Tensor(dist)
    if _tracks(x, y):

        def bw(g, x=x, y=y, diff=diff, dist=dist):
            denom = np.maximum(dist, _DIST_FLOOR)
            if diff.ndim == 2:
                gd = (g / denom)[:, None] * diff
            else:
                gd = (g / denom) * diff
            _accum(x, gd)
            _accum(y, -gd)

        return _record(out, bw)
    return out


def sum_(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))
    if _tracks(x):

        def bw(g, x=x, axis=axis):
            if axis is None:
                _accum(x, np.broadcast_to(g, x.shape).copy())
            else:
                _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

        return _record(out, bw)
    return out


def mean_(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    if _tracks(x):

        def bw(g, x=x):
            _accum(x, g.reshape(x.shape))

        return _record(out, bw)
    return out


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.transpose(x.data, axes).copy())
    if _tracks(x):
        if axes is None:
            inv = None
        else:
            inv = np.argsort(axes)

        def bw(g, x=x, inv=inv):
            _accum(x, np.transpose(g, inv))

        return _record(out, bw)
    return out


def take(x, key) -> Tensor:
    """Indexing/slicing with gradient scatter-add back into the source."""
    x = _as_tensor(x)
    out = Tensor(np.array(x.data[key], copy=True))
    if _tracks(x):

        def bw(g, x=x, key=key):
            gx = np.zeros_like(x.data)
            np.add.at(gx, key, g)
            _accum(x, gx)

        return _record(out, bw)
    return out


def add_bias(x, b) -> Tensor:
    """Add a (d,) vector across the leading axes of (..., d)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    out = Tensor(x.data + b.data)
    if _tracks(x, b):

        def bw(g, x=x, b=b):
            _accum(x, g)
            lead = tuple(range(g.ndim - 1))
            _accum(b, g.sum(axis=lead) if lead else g.copy())

        return _record(out, bw)
    return out


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class FiniteDifferenceReport:
    max_rel_error: float
    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def finite_difference_check(
    f,
    params,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_checks_per_param: int | None = None,
    seed: int = 0,
) -> FiniteDifferenceReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor computed from ``params``, a list of (name, Tensor) pairs. When
    ``max_checks_per_param`` is set, a seeded subset of elements per parameter
    is probed; otherwise every element is.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for _, p in params:
        p.zero_grad()
    reset_tape()
    loss = f()
    backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params}
    rng = np.random.Generator(np.random.PCG64(seed))
    report = FiniteDifferenceReport(max_rel_error=0.0, tolerance=tolerance)
    for name, p in params:
        if not p.data.flags["C_CONTIGUOUS"]:
            p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_checks_per_param is not None and n > max_checks_per_param:
            idxs = rng.choice(n, size=max_checks_per_param, replace=False)
        else:
            idxs = np.arange(n)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                hi = float(f().data)
            flat[i] = orig - epsilon
            with no_grad():
                lo = float(f().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
