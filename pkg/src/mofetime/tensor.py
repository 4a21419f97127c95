"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation executed on a tensor that requires grad leaves a
record behind; ``backward`` replays those records in reverse creation order.
Broadcasting is limited to leading-batch expansion: two operands must have equal
shapes, or the shape of one must be a suffix of the other's.  Anything else is a
:class:`ShapeError`.  Use :func:`broadcast_to` to expand explicitly.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradTape", "ShapeError", "NonFiniteError", "no_grad", "is_grad_enabled",
    "tensor", "add", "sub", "mul", "div", "neg", "scale", "matmul", "sigmoid", "swish",
    "sin", "cos", "exp", "softmax", "huber", "reduce_sum", "reduce_mean", "index",
    "concat", "reshape", "transpose", "broadcast_to", "index_add",
    "depthwise_dilated_conv1d", "layer_norm", "forward_op", "backward", "OPS",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's shape rule."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


_state = threading.local()
_counter = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Record:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.seq = next(_counter)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """An n-d array of float64 with optional gradient tracking.

    ``data`` is a C-contiguous numpy array; ``grad`` is ``None`` until a backward
    pass (or :meth:`zero_grad`) fills it with an array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_record", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ShapeError("tensor", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: _Record | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._record = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _emit(op: str, out: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op)
    t = Tensor._wrap(np.ascontiguousarray(out))
    if is_grad_enabled() and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t._record = _Record(op, inputs, backward_fn)
    return t


def _check_expand(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(op, sa, sb)


def _unexpand(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_expand("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unexpand(g, sa), _unexpand(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_expand("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unexpand(g, sa), -_unexpand(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_expand("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unexpand(g * bd, ad.shape), _unexpand(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_expand("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):  # _emit reports non-finite output
        out = ad / bd

    def bwd(g):
        return _unexpand(g / bd, ad.shape), _unexpand(-g * out / bd, bd.shape)

    return _emit("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a) -> Tensor:
    """x * sigmoid(x) (SiLU)."""
    a = _as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _emit("swish", x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _emit("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _emit("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a constant boolean array (suffix-expandable to ``a``); masked-out
    entries get probability exactly zero.  Every row needs one unmasked entry.
    """
    a = _as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if x.shape[x.ndim - mask.ndim:] != mask.shape:
            raise ShapeError("softmax", x.shape, mask.shape)
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (a,), bwd)


def huber(pred, target, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty of ``pred - target`` with knee ``delta``."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("huber", pred.shape, target.shape)
    if not delta > 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    r = pred.data - target.data
    ar = np.abs(r)
    quad = ar <= delta
    out = np.where(quad, 0.5 * r * r, delta * (ar - 0.5 * delta))
    dr = np.where(quad, r, delta * np.sign(r))
    return _emit("huber", out, (pred, target), lambda g: (g * dr, -g * dr))


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=True)
    kept_shape = out.shape
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(a.shape) if i not in axes) or (1,))
    shape = a.shape
    return _emit("sum", out, (a,),
                 lambda g: (np.broadcast_to(g.reshape(kept_shape), shape).copy(),))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.sum(axis=axes, keepdims=True) / count
    kept_shape = out.shape
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(a.shape) if i not in axes) or (1,))
    shape = a.shape
    return _emit("mean", out, (a,),
                 lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, shape).copy(),))


# ---------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    """``a @ b`` for a (..., n, k) and b (k, m) or b (..., k, m) with equal batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError("matmul", sa, sb)
    if len(sb) > 2 and sb[:-2] != sa[:-2]:
        raise ShapeError("matmul", sa, sb)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


def index(a, key) -> Tensor:
    """Basic or integer-array indexing (the ``slice`` op)."""
    a = _as_tensor(a)
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError("slice", a.shape) from exc
    if out.ndim == 0:
        out = out.reshape(1)
    if out.size == 0:
        raise ShapeError("slice", a.shape, out.shape)
    shape = a.shape
    raw_shape = a.data[key].shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, key, g.reshape(raw_shape))
        return (full,)

    return _emit("slice", out, (a,), bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat")
    nd = ts[0].data.ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.data.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=ax))

    return _emit("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bwd)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", a.shape, shape) from exc
    old = a.shape
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    nd = a.data.ndim
    axes = tuple(reversed(range(nd))) if axes is None else tuple(ax % nd for ax in axes)
    if sorted(axes) != list(range(nd)):
        raise ShapeError("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style expansion; the gradient sums over expanded axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError("broadcast_to", a.shape, shape) from exc
    src = a.shape
    lead = len(shape) - len(src)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(src) if n == 1 and shape[lead + i] != 1)

    def bwd(g):
        return (g.sum(axis=axes, keepdims=True).reshape(src),)

    return _emit("broadcast_to", out.copy(), (a,), bwd)


def index_add(target, idx: np.ndarray, src) -> Tensor:
    """``target`` with ``src`` rows added at integer positions ``idx`` along axis 0."""
    target, src = _as_tensor(target), _as_tensor(src)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or src.shape != (len(idx),) + target.shape[1:]:
        raise ShapeError("index_add", target.shape, src.shape)
    out = target.data.copy()
    np.add.at(out, idx, src.data)
    return _emit("index_add", out, (target, src), lambda g: (g, g[idx]))


# ---------------------------------------------------------------- composite kernels

def depthwise_dilated_conv1d(x, filters, dilation: int) -> Tensor:
    """Causal depthwise conv along the time axis.

    x is (..., T, h) and filters (K, h); ``y[j] = sum_k filters[k] * x[j - k*dilation]``
    with out-of-range (negative) time indices contributing zero.
    """
    x, filters = _as_tensor(x), _as_tensor(filters)
    xd, cd = x.data, filters.data
    if xd.ndim < 2 or cd.ndim != 2 or cd.shape[1] != xd.shape[-1]:
        raise ShapeError("depthwise_dilated_conv1d", x.shape, filters.shape)
    if dilation < 1:
        raise ValueError("depthwise_dilated_conv1d: dilation must be >= 1")
    T = xd.shape[-2]
    K = cd.shape[0]
    out = np.zeros_like(xd)
    for k in range(K):
        lag = k * dilation
        if lag >= T:
            break
        out[..., lag:, :] += cd[k] * xd[..., :T - lag, :]

    def bwd(g):
        gx = np.zeros_like(xd)
        gc = np.zeros_like(cd)
        for k in range(K):
            lag = k * dilation
            if lag >= T:
                break
            gx[..., :T - lag, :] += cd[k] * g[..., lag:, :]
            gc[k] = (g[..., lag:, :] * xd[..., :T - lag, :]).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gc

    return _emit("depthwise_dilated_conv1d", out, (x, filters), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``* gain + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bwd(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, h)
        return gx, (flat_g * xhat.reshape(-1, h)).sum(axis=0), flat_g.sum(axis=0)

    return _emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), bwd)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "scale": scale,
    "sigmoid": sigmoid,
    "swish": swish,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "softmax-lastdim": softmax,
    "huber": huber,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "slice": index,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "reshape": reshape,
    "transpose": transpose,
    "broadcast_to": broadcast_to,
    "index_add": index_add,
    "depthwise_dilated_conv1d": depthwise_dilated_conv1d,
    "layer_norm": layer_norm,
}


def forward_op(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward_op("softmax-lastdim", x)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------- backward

class GradTape:
    """The records reachable from one root, in creation order."""

    def __init__(self, records: list[_Record]):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        seen: set[int] = set()
        found: list[_Record] = []
        stack = [root._record] if root._record is not None else []
        while stack:
            rec = stack.pop()
            if id(rec) in seen:
                continue
            seen.add(id(rec))
            found.append(rec)
            for t in rec.inputs:
                if t._record is not None and id(t._record) not in seen:
                    stack.append(t._record)
        found.sort(key=lambda r: r.seq)
        return cls(found)

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.size != 1:
        raise ShapeError("backward", root.shape)
    if root._record is None:
        if root.requires_grad:
            root.grad = (root.grad if root.grad is not None else 0.0) + np.ones_like(root.data)
        return
    tape = GradTape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root._record): np.ones_like(root.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec), None)
        if g is None:
            continue
        in_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._record is not None:
                key = id(t._record)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=np.float64)
            else:
                t.grad += gi


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
