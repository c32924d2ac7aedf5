"""Dense tensors with tape-based reverse-mode differentiation.

Every operation returns a fresh :class:`Tensor` that owns its storage.  When
any input requires a gradient, the result records its parents and a closure
that maps the output gradient to input gradients.  :func:`backward` walks the
recorded graph once in reverse topological order.

Broadcasting is deliberately narrow: binary elementwise operations accept
equal shapes, a 0-d scalar operand, or a 1-d operand matching the trailing
axis (per-channel expansion).  Everything else raises :class:`DimensionError`.
Use :func:`expand` to repeat along a new axis explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional real array with an optional differentiation record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # internal constructor: takes ownership without copying
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.op = "leaf"
        return t

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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

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

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad: bool = False, dtype=np.float64) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        dtype = like.dtype
    elif isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        dtype = x.dtype
    else:
        dtype = np.float64
    return Tensor._wrap(np.array(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ----------------------------------------------------------------------------
# elementwise binary ops
# ----------------------------------------------------------------------------

def _broadcast_kind(a: np.ndarray, b: np.ndarray, name: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "b_channel"
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return "a_channel"
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, which: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"{which}_scalar":
        return np.asarray(g.sum(), dtype=g.dtype)
    if kind == f"{which}_channel":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    kind = _broadcast_kind(a.data, b.data, "add")

    def backward(g):
        return _reduce_to(g, kind, "a"), _reduce_to(g, kind, "b")

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    kind = _broadcast_kind(a.data, b.data, "sub")

    def backward(g):
        return _reduce_to(g, kind, "a"), _reduce_to(-g, kind, "b")

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    kind = _broadcast_kind(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, kind, "a"), _reduce_to(g * ad, kind, "b")

    return _make(ad * bd, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)

    def backward(g):
        return (g * c,)

    return _make(x.data * c, (x,), backward, "scale")


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-d operands, or batched operands with identical leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


# ----------------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), backward, "sigmoid")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    xd = x.data

    def backward(g):
        return (g * (s * (1.0 + xd * (1.0 - s))),)

    return _make(xd * s, (x,), backward, "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    th = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * (xd * xd))
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(0.5 * xd * (1.0 + th), (x,), backward, "gelu")


def sin(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g * np.cos(xd),)

    return _make(np.sin(xd), (x,), backward, "sin")


def cos(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (-g * np.sin(xd),)

    return _make(np.cos(xd), (x,), backward, "cos")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize each slice along ``axis`` to zero mean and unit variance (no affine)."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (x,), backward, "layer_norm")


def huber(pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: ``0.5 r^2 / delta`` inside ``|r| < delta``, else ``|r| - 0.5 delta``."""
    if delta <= 0:
        raise ContractError("huber: delta must be positive")
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"huber: shapes differ {pred.shape} vs {target.shape}")
    r = pred.data - target.data
    ar = np.abs(r)
    quad = ar < delta
    val = np.where(quad, 0.5 * r * r / delta, ar - 0.5 * delta)

    def backward(g):
        dr = np.where(quad, r / delta, np.sign(r)) * g
        return dr, -dr

    return _make(val.astype(r.dtype, copy=False), (pred, target), backward, "huber")


# ----------------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(tuple(shape)).copy()
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(src),)

    return _make(y, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def backward(g):
        out = np.zeros(src_shape, dtype=dtype)
        if _has_advanced(idx):
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _make(np.array(x.data[idx], copy=True), (x,), backward, "getitem")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def split(x: Tensor, n: int, axis: int = -1) -> list[Tensor]:
    """Split ``x`` into ``n`` equal chunks along ``axis``."""
    ax = axis % x.ndim
    if x.shape[ax] % n:
        raise DimensionError(f"split: axis extent {x.shape[ax]} not divisible by {n}")
    step = x.shape[ax] // n
    pre = (slice(None),) * ax
    return [getitem(x, pre + (slice(i * step, (i + 1) * step),)) for i in range(n)]


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, xs[0].shape)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax)) for i in range(len(xs))
        )

    return _make(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), backward, "concat")


def expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``x`` ``n`` times along it."""
    ax = axis % (x.ndim + 1)
    y = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)

    def backward(g):
        return (g.sum(axis=ax),)

    return _make(y, (x,), backward, "expand")


def sum_(x: Tensor, axis=None) -> Tensor:
    src = x.shape

    def backward(g):
        if axis is None:
            return (np.full(src, g, dtype=x.dtype) if np.ndim(g) == 0 else np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum_(x, axis), 1.0 / n)


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Unpadded 3-D cross-correlation.

    ``x`` is ``(C, D, H, W)`` or batched ``(B, C, D, H, W)``; ``w`` is
    ``(F, C, k, k, k)``.  Every extent must tile exactly: ``(E - k) % stride == 0``.
    """
    batched = x.ndim == 5
    if not batched:
        if x.ndim != 4:
            raise DimensionError(f"conv3d: expected 4-d or 5-d input, got {x.shape}")
        x = reshape(x, (1,) + x.shape)
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise DimensionError(f"conv3d: weight must be (F, C, k, k, k), got {w.shape}")
    B, C, D, H, W = x.shape
    F, Cw, k = w.shape[0], w.shape[1], w.shape[2]
    if Cw != C:
        raise DimensionError(f"conv3d: input has {C} channels, weight expects {Cw}")
    for e in (D, H, W):
        if e < k or (e - k) % stride:
            raise DimensionError(f"conv3d: extents {(D, H, W)} do not tile with kernel {k}, stride {stride}")
    Do, Ho, Wo = (D - k) // stride + 1, (H - k) // stride + 1, (W - k) // stride + 1
    xd = x.data
    if k == stride:
        cols = (
            xd.reshape(B, C, Do, k, Ho, k, Wo, k)
            .transpose(0, 2, 4, 6, 1, 3, 5, 7)
            .reshape(B * Do * Ho * Wo, C * k**3)
        )
    else:
        win = sliding_window_view(xd, (k, k, k), axis=(2, 3, 4))[:, :, ::stride, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * Do * Ho * Wo, C * k**3)
    wm = w.data.reshape(F, C * k**3)
    out = cols @ wm.T
    if b is not None:
        if b.shape != (F,):
            raise DimensionError(f"conv3d: bias must have shape ({F},), got {b.shape}")
        out = out + b.data
    y = np.ascontiguousarray(out.reshape(B, Do, Ho, Wo, F).transpose(0, 4, 1, 2, 3))

    def backward(g):
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, F)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gm.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=0)
        if x.requires_grad:
            gcols = (gm @ wm).reshape(B, Do, Ho, Wo, C, k, k, k)
            if k == stride:
                gx = gcols.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, C, D, H, W)
            else:
                gx = np.zeros(xd.shape, dtype=xd.dtype)
                gc = gcols.transpose(0, 4, 5, 6, 7, 1, 2, 3)
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            gx[:, :, i : i + stride * Do : stride, j : j + stride * Ho : stride,
                               l : l + stride * Wo : stride] += gc[:, :, i, j, l]
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    out_t = _make(y, parents, backward, "conv3d")
    return out_t if batched else reshape(out_t, out_t.shape[1:])


# ----------------------------------------------------------------------------
# graph traversal
# ----------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents before children."""
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
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf requiring grad."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any leaf requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def finite_difference_grad(
    f: Callable[[Tensor], Tensor | float],
    x: Tensor,
    h: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``.

    With ``indices`` only those coordinates are evaluated; the rest stay zero.
    ``x.data`` is perturbed in place and restored.
    """
    if h <= 0:
        raise ContractError("finite_difference_grad: h must be positive")
    grad = np.zeros(x.shape, dtype=np.float64)
    coords = list(np.ndindex(x.shape)) if indices is None else [tuple(i) for i in indices]

    def value() -> float:
        with no_grad():
            out = f(x)
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    for idx in coords:
        orig = x.data[idx].copy()
        x.data[idx] = orig + h
        fp = value()
        x.data[idx] = orig - h
        fm = value()
        x.data[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
