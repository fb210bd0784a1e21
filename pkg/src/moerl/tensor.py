"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor` holding references to
its parents and a closure that maps the output gradient to parent gradients.
:func:`backward` walks the resulting DAG once in reverse topological order.

Inside :func:`no_grad` ops skip closure construction entirely, which is what
acting and target-network evaluation use.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf."""


class NonScalarError(ValueError):
    """backward() was asked to differentiate a non-scalar output."""


@contextlib.contextmanager
def no_grad():
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
    """An n-dimensional float64 array that may participate in autodiff.

    ``requires_grad`` marks a trainable leaf. Non-leaf tensors carry
    ``_parents`` and ``_backward``; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.base is not None or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # arithmetic sugar
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

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def backward(self):
        grads = backward(self)
        for leaf, g in grads.items():
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad or t._backward is not None for t in ts)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.op = op
    if _needs_grad(*parents):
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: x²/2 inside |x| ≤ delta, linear outside."""
    xd = x.data
    ax = np.abs(xd)
    quad = ax <= delta
    out = np.where(quad, 0.5 * xd * xd, delta * (ax - 0.5 * delta))
    dx = np.where(quad, xd, delta * np.sign(xd))
    return _make(out, (x,), lambda g: (g * dx,), "huber")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    axes = _norm_axis(axis, x.ndim)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def _resolve_softmax_axis(axis) -> int:
    if axis == "rows":
        return -1
    if axis == "columns":
        return -2
    return int(axis)


def softmax(x: Tensor, axis=-1) -> Tensor:
    """Max-stabilised softmax. ``axis`` may be an int or, for matrices,
    ``"rows"`` (each row sums to one) or ``"columns"`` (each column does)."""
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError("softmax input contains non-finite values")
    ax = _resolve_softmax_axis(axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _make(s, (x,), fn, "softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    se = e.sum(axis=axis, keepdims=True)
    out = (np.log(se) + m).squeeze(axis)
    s = e / se

    def fn(g):
        return (np.expand_dims(g, axis) * s,)

    return _make(out, (x,), fn, "logsumexp")


# ---------------------------------------------------------------- structure


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch {ad.shape} @ {bd.shape}")

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), fn, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make(np.ascontiguousarray(np.swapaxes(x.data, a, b)), (x,),
                 lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), fn, "getitem")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), fn, "concat")


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    b, h, w, c = x.shape
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    sb, sh, sw, sc = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, shape=(b, ho, wo, k, k, c), strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False)
    return view.reshape(b, ho, wo, k * k * c)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation.

    ``x`` is ``h×w×c`` or batched ``b×h×w×c``; ``kernels`` is ``k×k×c×o``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    k, k2, c, o = kernels.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    b, h, w, cin = xd.shape
    if cin != c:
        raise ValueError(f"channel mismatch: input {cin}, kernels {c}")
    if k > h or k > w:
        raise ValueError(f"kernel {k}x{k} larger than input {h}x{w}")
    xd = np.ascontiguousarray(xd)
    cols = _im2col(xd, k, stride)
    wmat = kernels.data.reshape(k * k * c, o)
    out = cols @ wmat
    ho, wo = out.shape[1], out.shape[2]

    def fn(g):
        g4 = g if batched else g[None]
        gw = cols.reshape(-1, k * k * c).T @ g4.reshape(-1, o)
        gcols = (g4 @ wmat.T).reshape(b, ho, wo, k, k, c)
        gx = np.zeros_like(xd)
        for i in range(k):
            for j in range(k):
                gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        return (gx if batched else gx[0]), gw.reshape(kernels.shape)

    return _make(out if batched else out[0], (x, kernels), fn, "conv2d")


# ---------------------------------------------------------------- graph


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` ordered so parents precede children.

    Traversal is iterative and follows parent order, so the result is
    deterministic for a given graph.
    """
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def trainable_leaves(root: Tensor) -> list[Tensor]:
    return [t for t in topological_order(root) if t.requires_grad and t._backward is None]


def backward(output: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to every trainable leaf.

    Returns a dict ordered by first appearance in the topological order.
    Leaves that do not influence the output are absent.
    """
    if output.size != 1:
        raise NonScalarError(f"backward() needs a scalar output, got shape {output.shape}")
    order = topological_order(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=DTYPE)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not (parent.requires_grad or parent._backward is not None):
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=DTYPE)
    ordered = [t for t in order if t in result]
    return {t: result[t] for t in ordered}


def grad(output: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``output`` for each tensor in ``wrt`` (zeros when unused)."""
    g = backward(output)
    return [g.get(t, np.zeros(t.shape, dtype=DTYPE)) for t in wrt]


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"non-finite values produced by {where}")
    return t
