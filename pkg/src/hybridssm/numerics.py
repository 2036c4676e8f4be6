"""Dense tensors with a small reverse-mode autodiff tape, plus a finite-difference oracle.

Every op records its parents and a closure mapping the output adjoint to the parent
adjoints. ``backward`` walks the graph in reverse topological order, visiting each node
once, and accumulates fan-in contributions in a fixed (insertion) order so gradients are
bit-identical across replays.

Broadcasting is restricted to leading-batch expansion: an operand's shape must equal the
other's or be a suffix of it (scalars included). Anything else raises.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PRECISIONS = {"verification": np.float64, "training": np.float32}
SOFTPLUS_LINEAR_CUTOFF = 30.0

_state = {"dtype": np.float64, "grad_enabled": True}
_ids = itertools.count()


def dtype_for(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


@contextmanager
def precision(name: str):
    """Temporarily change the dtype used for new tensors built from Python data."""
    old = _state["dtype"]
    _state["dtype"] = dtype_for(name)
    try:
        yield
    finally:
        _state["dtype"] = old


@contextmanager
def no_grad():
    old = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = old


class ShapeError(ValueError):
    pass


class Tensor:
    """An ndarray plus the bookkeeping needed to replay adjoints."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        from_python = not isinstance(data, np.ndarray)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif from_python or arr.dtype.kind in "biu" or arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._seq = next(_ids)

    # -- basic properties ---------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # -- operators ------------------------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading-batch expansion")
    return big


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _binary(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    return a, b


# -- elementwise ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "div")

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to stay finite for large |x|
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def softplus_np(x: np.ndarray) -> np.ndarray:
    safe = np.minimum(x, SOFTPLUS_LINEAR_CUTOFF)
    return np.where(x > SOFTPLUS_LINEAR_CUTOFF, x, np.log1p(np.exp(safe)))


def softplus_inverse_np(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.where(y > SOFTPLUS_LINEAR_CUTOFF, y, np.log(np.expm1(np.minimum(y, SOFTPLUS_LINEAR_CUTOFF))))


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x); returns x itself above 30 where the difference is below 1e-13."""
    s = sigmoid_np(x.data)
    return _make(softplus_np(x.data), (x,), lambda g: (g * s,), "softplus")


def silu(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def minimum(x: Tensor, bound: float) -> Tensor:
    keep = x.data <= bound
    out = np.where(keep, x.data, np.asarray(bound, dtype=x.dtype))
    return _make(out, (x,), lambda g: (g * keep,), "minimum")


# -- shape ops ------------------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def getitem(x: Tensor, idx) -> Tensor:
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw, "getitem")


def split_last(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover last axis {x.shape[-1]}")
    bounds = np.cumsum([0, *sizes])
    return [x[..., int(lo):int(hi)] for lo, hi in zip(bounds[:-1], bounds[1:])]


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0, *sizes])

    def bw(g):
        return tuple(g[..., int(lo):int(hi)] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, bw, "concat")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "take_rows")


def repeat_axis(x: Tensor, repeats: int, axis: int) -> Tensor:
    """np.repeat along one axis; the adjoint sums each group of copies."""
    axis = axis % x.ndim

    def bw(g):
        shp = g.shape[:axis] + (x.shape[axis], repeats) + g.shape[axis + 1:]
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _make(np.repeat(x.data, repeats, axis=axis), (x,), bw, "repeat")


# -- reductions ------------------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- linear algebra ---------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over identical leading dims, or [..., n] @ [n, m]."""
    a, b = _binary(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dims differ: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x @ w.T with w stored as [out, in]."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} vs weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        return (g2 @ w.data).reshape(x.shape), g2.T @ x2

    return _make((x2 @ w.data.T).reshape(*lead, w.shape[0]), (x, w), bw, "linear")


# -- normalisation / softmax / losses -----------------------------------------------------
def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6, groups: int = 1) -> Tensor:
    """RMS normalisation over the last axis, optionally within ``groups`` equal slices."""
    d = x.shape[-1]
    if d % groups:
        raise ShapeError(f"rmsnorm: width {d} not divisible by {groups} groups")
    if gain.shape != (d,):
        raise ShapeError(f"rmsnorm: gain shape {gain.shape} != ({d},)")
    xs = x.data.reshape(*x.shape[:-1], groups, d // groups)
    inv = 1.0 / np.sqrt(np.mean(xs * xs, axis=-1, keepdims=True) + eps)
    xhat = xs * inv
    out = xhat.reshape(x.shape) * gain.data

    def bw(g):
        gg = (g * gain.data).reshape(xs.shape)
        gx = inv * (gg - xhat * np.mean(gg * xhat, axis=-1, keepdims=True))
        ggain = (g * xhat.reshape(x.shape)).reshape(-1, d).sum(axis=0)
        return gx.reshape(x.shape), ggain

    return _make(out, (x, gain), bw, "rmsnorm")


def masked_softmax(scores: Tensor, allowed: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` entries (others get exactly 0)."""
    allowed = np.broadcast_to(allowed, scores.shape)
    if not allowed.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no allowed entries")
    z = np.where(allowed, scores.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p.astype(scores.dtype, copy=False), (scores,), bw, "softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean token cross-entropy; ``weights`` of 0 drop a position."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    w = np.ones(t.shape, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype).reshape(-1)
    if np.any((t < 0) | (t >= v)) and np.any(w[(t < 0) | (t >= v)] != 0):
        raise ValueError("cross_entropy: target id outside vocabulary")
    t = np.where((t >= 0) & (t < v), t, 0)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy: no positions carry weight")
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    nll = lse - flat[np.arange(len(t)), t]
    loss = np.asarray((w * nll).sum() / denom, dtype=logits.dtype)

    def bw(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        return ((g * w[:, None] / denom) * p).reshape(logits.shape).astype(logits.dtype, copy=False),

    return _make(loss, (logits,), bw, "cross_entropy")


def custom_op(inputs: Sequence[Tensor], out: np.ndarray, backward, op: str) -> Tensor:
    """Register an op whose adjoint is supplied by the caller (used by fused kernels)."""
    return _make(out, inputs, backward, op)


# -- backward ---------------------------------------------------------------------------
def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns ``{leaf: dloss/dleaf}`` for every leaf with ``requires_grad`` reached from the
    loss (restricted to ``params`` when given); leaves also get ``.grad`` set. NaNs are
    propagated, with a warning naming the first op that produced one.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor that requires grad")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    reported = False
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not reported and not np.all(np.isfinite(pg)):
                warnings.warn(f"non-finite gradient produced by op '{node.op}'"
                              + (f" ({node.name})" if node.name else ""), RuntimeWarning, stacklevel=2)
                reported = True
            if pg.shape != parent.shape:
                raise ShapeError(f"adjoint of '{node.op}' has shape {pg.shape}, parent is {parent.shape}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    wanted = None if params is None else {id(p) for p in params}
    out: dict[Tensor, np.ndarray] = {}
    for node in order:
        if node._backward is None and node.requires_grad and (wanted is None or id(node) in wanted):
            node.grad = grads.get(id(node), np.zeros_like(node.data))
            out[node] = node.grad
    if params is not None:
        for p in params:
            if p not in out:
                p.grad = np.zeros_like(p.data)
                out[p] = p.grad
    return out


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-6,
                               indices: Iterable | None = None) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.

    ``indices`` (flat positions) restricts the probe set; unprobed entries are NaN.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.zeros(flat.shape)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing coordinate {tuple(int(j) for j in np.unravel_index(i, x.shape))}")
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over probed entries, scaled by the largest numeric magnitude."""
    mask = ~np.isnan(numeric)
    a, n = np.asarray(analytic)[mask], np.asarray(numeric)[mask]
    if a.size == 0:
        return 0.0
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-12)
    return float(np.max(np.abs(a - n)) / scale)
