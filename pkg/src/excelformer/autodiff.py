"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  Calling
:meth:`Tensor.backward` on a scalar sorts the recorded graph topologically (the
tape) and runs the closures in reverse order.  The graph is rebuilt on every
forward pass; nothing is cached between passes.

Tensors are capped at rank 3 (batch x features x width).  Multi-head attention
folds heads into the leading axis via :func:`split_heads` / :func:`merge_heads`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3
MASK_VALUE = -1e5

_recording = True

__all__ = [
    "Tensor",
    "MASK_VALUE",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "take",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "clip",
    "relu",
    "prelu",
    "softmax",
    "masked_softmax",
    "dropout",
    "split_heads",
    "merge_heads",
    "elementwise",
    "tape",
    "gradcheck",
    "no_grad",
]


class Tensor:
    """A node on the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensors are limited to rank {MAX_RANK}, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = tape(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate so that several losses can share parameters
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node.requires_grad and node._backward is not None:
                node.grad = g

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of nodes reachable from ``root`` (parents first)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference); outputs never require grad."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    req = _recording and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        )

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: ((a, -g),), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    # (..., m, k) @ (k, n) runs as one 2-D product; BLAS is much faster that way
    flat = b.ndim == 2 and a.ndim > 2
    k = a.shape[-1]
    try:
        if flat:
            out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ((a, ga), (b, gb))
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _make(out, (a, b), backward, "matmul")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` for x (..., k), w (k, n), b (n,) as one tape node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.shape != (w.shape[1],) or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"affine: shapes {x.shape}, {w.shape}, {b.shape} are incompatible")
    k, n = w.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    out += b.data
    out = out.reshape(x.shape[:-1] + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return ((x, gx), (w, gw), (b, gb))

    return _make(out, (x, w, b), backward, "affine")


# ---------------------------------------------------------------- reductions / shape


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: ((a, g.reshape(a.shape)),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: ((a, np.transpose(g, inv)),), "transpose")


def take(a, index) -> Tensor:
    """Gather rows along axis 0 (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return ((a, ga),)

    return _make(a.data[index], (a,), backward, "take")


def _index(a: Tensor, idx) -> Tensor:
    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ((a, ga),)

    return _make(a.data[idx], (a,), backward, "index")


# ---------------------------------------------------------------- elementwise


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: ((a, g * (1.0 - out * out)),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: ((a, g * out * (1.0 - out)),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: ((a, g * out),), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: ((a, g / a.data),), "log")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: ((a, g * inside),), "clip")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: ((a, g * pos),), "relu")


def prelu(a, slope) -> Tensor:
    """x for x >= 0, slope * x otherwise.  ``slope`` may be a float or a (learnable) tensor."""
    a, s = as_tensor(a), as_tensor(slope)
    neg_part = a.data < 0
    out = np.where(neg_part, s.data * a.data, a.data)

    def backward(g):
        ga = g * np.where(neg_part, s.data, 1.0) if a.requires_grad else None
        gs = _unbroadcast(g * a.data * neg_part, s.shape) if s.requires_grad else None
        return ((a, ga), (s, gs))

    return _make(out, (a, s), backward, "prelu")


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "prelu": prelu,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("prelu", x, 0.25)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# ---------------------------------------------------------------- softmax family


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    out = _softmax_np(a.data)

    def backward(g):
        return ((a, out * (g - (g * out).sum(axis=-1, keepdims=True))),)

    return _make(out, (a,), backward, "softmax")


def masked_softmax(logits, mask, scale: float = 1.0) -> Tensor:
    """Row softmax of ``(logits + mask) * scale`` over the trailing f x f block.

    ``mask`` holds 0 (open) or ``MASK_VALUE`` (blocked).  Blocked entries come
    out as exact zeros in float64 because exp underflows, so no gradient leaks
    through them either.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if logits.ndim < 2 or logits.shape[-1] != logits.shape[-2]:
        raise ValueError(f"masked_softmax: trailing extents must be square, got {logits.shape}")
    if mask.shape != logits.shape[-2:]:
        raise ValueError(f"masked_softmax: mask {mask.shape} does not match logits {logits.shape}")
    out = _softmax_np((logits.data + mask) * scale)

    def backward(g):
        return ((logits, scale * out * (g - (g * out).sum(axis=-1, keepdims=True))),)

    return _make(out, (logits,), backward, "masked_softmax")


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time only."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    a = as_tensor(a)
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: ((a, g * keep),), "dropout")


# ---------------------------------------------------------------- head folding


def split_heads(a, heads: int) -> Tensor:
    """(B, f, d) -> (B*heads, f, d/heads)."""
    a = as_tensor(a)
    B, f, d = a.shape
    if d % heads:
        raise ValueError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    out = a.data.reshape(B, f, heads, dh).transpose(0, 2, 1, 3).reshape(B * heads, f, dh)

    def backward(g):
        return ((a, g.reshape(B, heads, f, dh).transpose(0, 2, 1, 3).reshape(B, f, d)),)

    return _make(out, (a,), backward, "split_heads")


def merge_heads(a, heads: int) -> Tensor:
    """(B*heads, f, dh) -> (B, f, heads*dh)."""
    a = as_tensor(a)
    BH, f, dh = a.shape
    if BH % heads:
        raise ValueError(f"leading extent {BH} is not divisible by {heads} heads")
    B = BH // heads
    out = a.data.reshape(B, heads, f, dh).transpose(0, 2, 1, 3).reshape(B, f, heads * dh)

    def backward(g):
        return ((a, g.reshape(B, f, heads, dh).transpose(0, 2, 1, 3).reshape(BH, f, dh)),)

    return _make(out, (a,), backward, "merge_heads")


# ---------------------------------------------------------------- gradient check


def gradcheck(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor.  ``coords``
    restricts the check to a subset of flat indices (all by default).
    """
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    f(x).backward()
    analytic = np.zeros_like(x0) if x.grad is None else x.grad
    flat_a = analytic.reshape(-1)
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x0.copy().reshape(-1)
        xm = xp.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2.0 * h)
        err = abs(flat_a[i] - numeric) / max(1.0, abs(flat_a[i]))
        worst = max(worst, err)
    return worst
