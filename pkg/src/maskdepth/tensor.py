"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that touches a tensor with ``requires_grad=True`` records a
node holding its parents and an adjoint closure. Node ids come from a global
counter, so construction order is a topological order of the graph and the
backward pass simply replays nodes by descending id.

Gradient policy:

* leaf tensors created with ``requires_grad=True`` carry a zero ``grad``
  buffer from birth; ``backward`` adds into it (accumulation across separate
  graphs) until :meth:`Tensor.zero_grad` is called;
* a graph is released once it has been differentiated, and a second
  ``backward`` through it raises :class:`GraphReleasedError` (no
  higher-order derivatives);
* elementwise ``minimum``/``maximum`` route the gradient of a tie to the
  first operand.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "GraphReleasedError",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "pow",
    "sqrt",
    "clamp",
    "abs",
    "sin",
    "cos",
    "gelu",
    "matmul",
    "sum",
    "mean",
    "minimum",
    "maximum",
    "reshape",
    "transpose",
    "getitem",
    "slice_axis",
    "concat",
    "stack",
    "pad",
    "shift",
    "flip",
    "gather",
    "where",
    "softmax",
    "layer_norm",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class DomainError(ValueError):
    """Raised when an operation is evaluated outside its domain."""


class GraphReleasedError(RuntimeError):
    """Raised when differentiating through a graph that was already consumed."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_adjoint", "_released")

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable | None = None
        self._released = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._adjoint is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
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

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._adjoint = adjoint
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ----------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------
def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphReleasedError("graph already differentiated; double backward is unsupported")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        loss.grad = loss.grad + np.ones_like(loss.data)
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        if t._released:
            raise GraphReleasedError("graph already differentiated; double backward is unsupported")
        nodes[t.node_id] = t
        for p in t._parents:
            if p.requires_grad and p.node_id not in nodes:
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if t.is_leaf:
            if g is not None:
                t.grad = t.grad + g if t.grad is not None else g.copy()
            continue
        if g is not None:
            pgrads = t._adjoint(g)
            for p, pg in zip(t._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(p.node_id)
                grads[p.node_id] = pg if prev is None else prev + pg
        t._parents = ()
        t._adjoint = None
        t._released = True


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    ad, bd = a.data, b.data

    def adj(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), adj)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def adj(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), adj)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value; clamp the input first")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def pow(a, p) -> Tensor:
    a = _as_tensor(a)
    if isinstance(p, Tensor):
        _broadcast_check(a, p)
        if np.any(a.data <= 0):
            raise DomainError("tensor exponent requires a positive base")
        ad, pd = a.data, p.data
        out = ad**pd

        def adj(g):
            return (
                _unbroadcast(g * pd * ad ** (pd - 1.0), ad.shape) if a.requires_grad else None,
                _unbroadcast(g * out * np.log(ad), pd.shape) if p.requires_grad else None,
            )

        return _node(out, (a, p), adj)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("fractional power of a negative value")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("negative power of zero")
    ad = a.data
    return _node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x >= lo
    if hi is not None:
        keep &= x <= hi
    return _node(out, (a,), lambda g: (g * keep,))


def abs(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * s,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _node(np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _node(np.cos(x), (a,), lambda g: (-g * np.sin(x),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def adj(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return _node(out, (a,), adj)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape

    def adj(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), sa) if a.requires_grad else None,
            _unbroadcast(np.where(cond, 0.0, g), sb) if b.requires_grad else None,
        )

    return _node(out, (a, b), adj)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return where(a.data <= b.data, a, b)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b)
    return where(a.data >= b.data, a, b)


# ----------------------------------------------------------------------
# linear algebra and reductions
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],) if b.ndim > 1 else ())
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def adj(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), adj)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _node(out, (a,), lambda g: (np.broadcast_to(g.reshape(kept), shape),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


# ----------------------------------------------------------------------
# layout
# ----------------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) into {shape}") from None
    src = a.shape
    return _node(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = np.argsort([ax % a.ndim for ax in axes])
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    out = a.data[idx]
    shape = a.shape
    basic = _is_basic(idx)

    def adj(g):
        z = np.zeros(shape)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _node(np.array(out, dtype=np.float64), (a,), adj)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """``a[..., start:stop, ...]`` along ``axis`` with strict bounds checking."""
    a = _as_tensor(a)
    axis = _norm_axes(axis, a.ndim)[0]
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise IndexError(f"slice [{start}:{stop}] out of range for extent {n} on axis {axis}")
    idx = (slice(None),) * axis + (slice(start, stop),)
    return getitem(a, idx)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    axis = _norm_axes(axis, ts[0].ndim)[0]
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {ts[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def adj(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, adj)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    axis = axis % (ts[0].ndim + 1)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def gather(a, index) -> Tensor:
    """Flat gather: ``out = a.ravel()[index]``; the adjoint scatter-adds."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.size):
        raise IndexError(f"gather index out of range for {a.size} elements")
    n = a.size
    shape = a.shape
    out = a.data.reshape(-1)[index]

    def adj(g):
        return (np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=n).reshape(shape),)

    return _node(out, (a,), adj)


def _index_grid(shape: tuple[int, ...]) -> np.ndarray:
    return np.arange(int(np.prod(shape)), dtype=np.intp).reshape(shape)


def pad(a, widths, mode: str = "constant", value: float = 0.0) -> Tensor:
    """Pad with ``np.pad``-style ``widths``; modes ``constant`` and ``edge``."""
    a = _as_tensor(a)
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError(f"pad widths for rank {len(widths)} given to rank {a.ndim} tensor")
    if mode == "edge":
        idx = np.pad(_index_grid(a.shape), widths, mode="edge")
        return gather(a, idx)
    if mode != "constant":
        raise ValueError(f"unsupported pad mode {mode!r}")
    out = np.pad(a.data, widths, mode="constant", constant_values=value)
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _node(out, (a,), lambda g: (g[inner],))


def shift(a, offset: int, axis: int) -> Tensor:
    """``out[i] = a[clip(i + offset)]`` along ``axis`` (edge replication)."""
    a = _as_tensor(a)
    axis = _norm_axes(axis, a.ndim)[0]
    n = a.shape[axis]
    src = np.clip(np.arange(n) + offset, 0, n - 1)
    idx = np.take(_index_grid(a.shape), src, axis=axis)
    return gather(a, idx)


def flip(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axes(axis, a.ndim)[0]
    return _node(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),))


# ----------------------------------------------------------------------
# normalisation
# ----------------------------------------------------------------------
def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axes(axis, a.ndim)[0]
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def adj(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), adj)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise over ``axis`` then apply ``gain``/``bias`` (broadcast on that axis)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a = _as_tensor(a)
    axis = _norm_axes(axis, a.ndim)[0]
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]
    bshape = [1] * a.ndim
    bshape[axis] = n

    gain_t = _as_tensor(gain) if gain is not None else None
    bias_t = _as_tensor(bias) if bias is not None else None
    gd = gain_t.data.reshape(bshape) if gain_t is not None else 1.0
    out = xhat * gd
    if bias_t is not None:
        out = out + bias_t.data.reshape(bshape)
    red = tuple(i for i in range(a.ndim) if i != axis)

    def adj(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=axis, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True)
        )
        grads = [gx]
        if gain_t is not None:
            grads.append((g * xhat).sum(axis=red).reshape(gain_t.shape) if gain_t.requires_grad else None)
        if bias_t is not None:
            grads.append(g.sum(axis=red).reshape(bias_t.shape) if bias_t.requires_grad else None)
        return tuple(grads)

    parents: list[Tensor] = [a]
    if gain_t is not None:
        parents.append(gain_t)
    if bias_t is not None:
        parents.append(bias_t)
    return _node(out, parents, adj)


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
