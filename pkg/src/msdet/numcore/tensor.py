"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation builds a node holding its parents and a
vector-Jacobian product closure. :func:`backward` replays the closures in
reverse topological order and accumulates into leaf tensors.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError

_state = {"grad_enabled": True, "detach_enabled": True}


@contextlib.contextmanager
def no_grad():
    """Disable tape construction (inference)."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def exact_gradients():
    """Make :meth:`Tensor.detach` a pass-through.

    Training cuts gradients at a few places (initial anchors, IoU targets).
    A finite-difference check perturbs the whole function, so those cuts
    have to be lifted while it runs.
    """
    prev = _state["detach_enabled"]
    _state["detach_enabled"] = False
    try:
        yield
    finally:
        _state["detach_enabled"] = prev


class Tensor:
    """A row-major float64 array, optionally recorded on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        if not _state["detach_enabled"]:
            return self
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operators -----------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

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

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _vjp=vjp, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "div")


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data

    def vjp(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _node(np.where(pick_a, a.data, b.data), (a, b), vjp, "maximum")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "minimum")
    pick_a = a.data <= b.data

    def vjp(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _node(np.where(pick_a, a.data, b.data), (a, b), vjp, "minimum")


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _node(np.where(cond, a.data, b.data), (a, b), vjp, "where")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------
def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (np.where(mask, g, 0.0),), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def inverse_sigmoid(y, eps: float = 1e-5) -> Tensor:
    """``ln(y / (1 - y))`` with ``y`` clamped to ``[eps, 1 - eps]``."""
    y = as_tensor(y)
    yc = np.clip(y.data, eps, 1.0 - eps)
    inside = (y.data >= eps) & (y.data <= 1.0 - eps)

    def vjp(g):
        return (np.where(inside, g / (yc * (1.0 - yc)), 0.0),)

    return _node(np.log(yc / (1.0 - yc)), (y,), vjp, "inverse_sigmoid")


def refine_logit(prev, delta, eps: float = 1e-5, bound: float = 30.0) -> Tensor:
    """``sigmoid(delta + inverse_sigmoid(prev))`` evaluated as ``p / (p + (1-p) e^-delta)``.

    The rewritten form returns ``prev`` bit-for-bit when ``delta == 0``
    (``p + (1 - p)`` rounds to exactly 1 for ``p`` in (0, 1)). The refined
    logit is held inside ``[-bound, bound]`` so the result stays strictly
    inside (0, 1); ``delta`` gets no gradient where that bound is active.
    """
    prev, delta = as_tensor(prev), as_tensor(delta)
    _broadcast_shape(prev, delta, "refine_logit")
    p = np.clip(prev.data, eps, 1.0 - eps)
    inside = (prev.data >= eps) & (prev.data <= 1.0 - eps)
    logit = np.log(p / (1.0 - p))
    d = np.clip(delta.data, -bound - logit, bound - logit)
    live = d == delta.data
    e = np.exp(-d)
    den = p + (1.0 - p) * e
    out = p / den

    def vjp(g):
        gp = gd = None
        if prev.requires_grad:
            gp = _unbroadcast(np.where(inside & live, g * e / (den * den), 0.0), prev.shape)
        if delta.requires_grad:
            gd = _unbroadcast(np.where(live, g * out * (1.0 - out), 0.0), delta.shape)
        return gp, gd

    return _node(out, (prev, delta), vjp, "refine_logit")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def clamp(x, lo=None, hi=None) -> Tensor:
    x = as_tensor(x)
    y = np.clip(x.data, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x.data >= lo
    if hi is not None:
        keep &= x.data <= hi
    return _node(y, (x,), lambda g: (np.where(keep, g, 0.0),), "clamp")


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / n)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilized softmax. ``mask`` (bool, True = blocked) zeroes entries."""
    x = as_tensor(x)
    ax = _norm_axis(axis, x.ndim)[0]
    z = x.data
    if mask is not None:
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _node(y, (x,), vjp, "softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = x.shape[-1]

    def vjp(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), vjp, "layer_norm")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    """Indexing (basic or advanced); advanced gradients accumulate duplicates."""
    x = as_tensor(x)
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        gx = np.zeros(x.shape)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _node(np.array(out, copy=True), (x,), vjp, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = _norm_axis(axis, ref.ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        out = []
        for i in range(len(tensors)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------
_DENSE_SCATTER_LIMIT = 1 << 22


def bilinear_sample(fmap, points) -> Tensor:
    """Bilinearly interpolate ``fmap`` at pixel coordinates ``points``.

    ``fmap`` is ``[..., H, W, C]`` and ``points`` is ``[..., P, 2]`` holding
    ``(x, y)`` = (column, row); the leading axes must match. Taps that fall
    outside ``[0, W-1] x [0, H-1]`` read zero, so the gradient there is zero.
    Returns ``[..., P, C]``.
    """
    fmap, points = as_tensor(fmap), as_tensor(points)
    if fmap.ndim < 3 or points.ndim < 2 or points.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: bad shapes map {fmap.shape}, points {points.shape}")
    lead = fmap.shape[:-3]
    if points.shape[:-2] != lead:
        raise DimensionError(f"bilinear_sample: leading axes differ, map {fmap.shape}, points {points.shape}")
    H, W, C = fmap.shape[-3:]
    P = points.shape[-2]
    G = int(np.prod(lead)) if lead else 1
    flat = fmap.data.reshape(G * H * W, C)
    pts = points.data.reshape(G, P, 2)
    x, y = pts[..., 0], pts[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0i, y0i = x0.astype(np.int64), y0.astype(np.int64)
    base = (np.arange(G) * (H * W))[:, None]

    # the four taps stacked on a leading axis: (0,0), (0,1), (1,0), (1,1) as (dy, dx)
    dx = np.array([0, 1, 0, 1])[:, None, None]
    dy = np.array([0, 0, 1, 1])[:, None, None]
    xi, yi = x0i + dx, y0i + dy
    valid = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
    wx = np.where(dx == 1, fx, 1.0 - fx)
    wy = np.where(dy == 1, fy, 1.0 - fy)
    cell = np.where(valid, yi * W + xi, 0)
    wts = wx * wy * valid
    vals = np.take(flat, base + cell, axis=0)                              # [4,G,P,C]
    out = np.einsum("tgp,tgpc->gpc", wts, vals)

    def vjp(g):
        g = g.reshape(G, P, C)
        gmap = gpts = None
        if fmap.requires_grad:
            if G * H * W * P <= _DENSE_SCATTER_LIMIT:
                # scatter as a product with the dense interpolation matrix
                gi = np.arange(G)[None, :, None]
                slots = ((gi * (H * W) + cell) * P + np.arange(P)).ravel()
                interp = np.bincount(slots, weights=wts.ravel(), minlength=G * H * W * P)
                gmap = (interp.reshape(G, H * W, P) @ g).reshape(fmap.shape)
            else:
                slots = ((base + cell)[..., None] * C + np.arange(C)).ravel()
                w = np.einsum("tgp,gpc->tgpc", wts, g).ravel()
                gmap = np.bincount(slots, weights=w, minlength=G * H * W * C).reshape(fmap.shape)
        if points.requires_grad:
            gv = np.einsum("gpc,tgpc->tgp", g, vals) * valid
            sx = np.where(dx == 1, 1.0, -1.0)
            sy = np.where(dy == 1, 1.0, -1.0)
            gx = (gv * wy * sx).sum(axis=0)
            gy = (gv * wx * sy).sum(axis=0)
            gpts = np.stack([gx, gy], axis=-1).reshape(points.shape)
        return gmap, gpts

    return _node(out.reshape(lead + (P, C)), (fmap, points), vjp, "bilinear_sample")


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------
def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
