"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float32 or float64 ndarray. Operations build a
computation graph eagerly; calling :func:`backward` on a scalar result walks
the graph in reverse topological order and accumulates gradients additively
into every leaf tensor that has ``requires_grad`` set.

Elementwise binary operations require operands of identical shape, except
that either side may be a scalar (a size-1 tensor or a plain Python number).
General broadcasting is deliberately not supported: segmentation workloads
never need it and forbidding it turns silent shape bugs into errors.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "no_grad",
    "backward",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "square",
    "sqrt",
    "tsum",
    "tmean",
    "tmax",
    "scale_channels",
    "add_channel_bias",
    "softmax_cross_entropy",
    "softmax",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""

    def __init__(self, op: str, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.shapes = (tuple(shape_a), tuple(shape_b))


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff.

    ``grad`` is populated only on leaves (tensors created directly rather
    than by an operation) and accumulates across backward calls until
    :meth:`zero_grad` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward: Callable | None) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and backward is not None and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection --------------------------------------------------

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
        return float(self.data.item())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- arithmetic operators -------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def sum(self, axes=None) -> "Tensor":
        return tsum(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return tmean(self, axes)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(grads: dict, node: Tensor, g: np.ndarray):
    """Add a gradient contribution for ``node``; callers pass fresh arrays."""
    if not node.requires_grad:
        return
    key = id(node)
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a scalar operand's shape.

    Always returns a fresh array: contributions are accumulated in place
    downstream, so aliasing the incoming gradient would corrupt siblings.
    """
    if g.shape == tuple(shape):
        return g.copy()
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _binary_shapes(op: str, a: Tensor, b: Tensor):
    if a.data.shape != b.data.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeMismatchError(op, a.data.shape, b.data.shape)


# -- elementwise binary ops ---------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _binary_shapes("add", a, b)
    data = a.data + b.data

    def bw(g, grads):
        _accumulate(grads, a, _reduce_to(g, a.data.shape))
        _accumulate(grads, b, _reduce_to(g, b.data.shape))

    return Tensor._result(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _binary_shapes("mul", a, b)
    data = a.data * b.data

    def bw(g, grads):
        _accumulate(grads, a, _reduce_to(g * b.data, a.data.shape))
        _accumulate(grads, b, _reduce_to(g * a.data, b.data.shape))

    return Tensor._result(data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _binary_shapes("div", a, b)
    data = a.data / b.data

    def bw(g, grads):
        _accumulate(grads, a, _reduce_to(g / b.data, a.data.shape))
        _accumulate(grads, b, _reduce_to(-g * data / b.data, b.data.shape))

    return Tensor._result(data, (a, b), bw)


# -- elementwise unary ops ----------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g, grads):
        _accumulate(grads, a, g * (a.data > 0))

    return Tensor._result(data, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    data = expit(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * data * (1.0 - data))

    return Tensor._result(data, (a,), bw)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) via logaddexp for overflow safety at large |x|
    data = np.logaddexp(np.zeros_like(a.data), a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * expit(a.data))

    return Tensor._result(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * data)

    return Tensor._result(data, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: requires strictly positive input")
    data = np.log(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g / a.data)

    return Tensor._result(data, (a,), bw)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bw(g, grads):
        _accumulate(grads, a, g * (2.0 * a.data))

    return Tensor._result(data, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt: requires non-negative input")
    data = np.sqrt(a.data)

    def bw(g, grads):
        _accumulate(grads, a, g * (0.5 / data))

    return Tensor._result(data, (a,), bw)


# -- shape and reduction ops --------------------------------------------


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def bw(g, grads):
        _accumulate(grads, a, np.asarray(g).reshape(a.data.shape).copy())

    return Tensor._result(data, (a,), bw)


def _normalize_axes(axes, ndim: int):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if ax < -ndim or ax >= ndim:
            raise ValueError(f"reduce: axis {ax} out of range for {ndim}-d tensor")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"reduce: repeated axis in {axes}")
    return tuple(sorted(norm))


def tsum(a: Tensor, axes=None) -> Tensor:
    """Sum over ``axes`` (all axes when None, yielding a 0-d tensor)."""
    axes = _normalize_axes(axes, a.data.ndim)
    data = np.asarray(a.data.sum(axis=axes))

    def bw(g, grads):
        if axes is None:
            full = np.broadcast_to(g, a.data.shape)
        else:
            g_keep = np.expand_dims(g, axes)
            full = np.broadcast_to(g_keep, a.data.shape)
        _accumulate(grads, a, full.astype(a.data.dtype, copy=True))

    return Tensor._result(data, (a,), bw)


def tmean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    if axes is None:
        count = a.data.size
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axes), 1.0 / count)


def tmax(a: Tensor, axes=None) -> Tensor:
    """Max over ``axes``; on ties the gradient goes to the first maximal index."""
    axes = _normalize_axes(axes, a.data.ndim)
    data = np.asarray(a.data.max(axis=axes))

    if axes is None:
        flat_idx = int(np.argmax(a.data))

        def bw(g, grads):
            full = np.zeros_like(a.data)
            full.flat[flat_idx] = g
            _accumulate(grads, a, full)

    else:
        kept = tuple(ax for ax in range(a.data.ndim) if ax not in axes)
        moved = np.transpose(a.data, kept + axes)
        lead = moved.shape[: len(kept)]
        flat = moved.reshape(int(np.prod(lead, dtype=np.int64)) if lead else 1, -1)
        arg = np.argmax(flat, axis=1)  # first maximal index per slice

        def bw(g, grads):
            gflat = np.zeros_like(flat)
            gflat[np.arange(flat.shape[0]), arg] = np.asarray(g).reshape(-1)
            full = gflat.reshape(moved.shape)
            inv = np.argsort(kept + axes)
            _accumulate(grads, a, np.ascontiguousarray(np.transpose(full, inv)))

    return Tensor._result(data, (a,), bw)


# -- channel helpers -----------------------------------------------------


def scale_channels(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a (C, ...) tensor by a per-channel vector of length C."""
    if s.data.ndim != 1 or s.data.shape[0] != a.data.shape[0]:
        raise ShapeMismatchError("scale_channels", a.data.shape, s.data.shape)
    shape = (a.data.shape[0],) + (1,) * (a.data.ndim - 1)
    data = a.data * s.data.reshape(shape)

    def bw(g, grads):
        _accumulate(grads, a, g * s.data.reshape(shape))
        _accumulate(grads, s, (g * a.data).reshape(a.data.shape[0], -1).sum(axis=1))

    return Tensor._result(data, (a, s), bw)


def add_channel_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias vector of length C to a (C, ...) tensor."""
    if b.data.ndim != 1 or b.data.shape[0] != a.data.shape[0]:
        raise ShapeMismatchError("add_channel_bias", a.data.shape, b.data.shape)
    shape = (a.data.shape[0],) + (1,) * (a.data.ndim - 1)
    data = a.data + b.data.reshape(shape)

    def bw(g, grads):
        _accumulate(grads, a, g.copy())
        _accumulate(grads, b, g.reshape(a.data.shape[0], -1).sum(axis=1))

    return Tensor._result(data, (a, b), bw)


# -- fused losses --------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax on a plain ndarray (no graph)."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels.

    ``logits`` must be (C, V); ``labels`` an integer array of V entries in
    [0, C). The softmax and log are fused so large logits cannot overflow,
    and the gradient is the familiar (softmax - onehot) / V.
    """
    if logits.data.ndim != 2:
        raise ShapeMismatchError("softmax_cross_entropy", logits.data.shape, ("C", "V"))
    n_classes, n_vox = logits.data.shape
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != n_vox:
        raise ShapeMismatchError("softmax_cross_entropy labels", logits.data.shape, y.shape)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be integers")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(
            f"softmax_cross_entropy: labels outside [0, {n_classes}): "
            f"range [{y.min()}, {y.max()}]"
        )
    z = logits.data
    zmax = z.max(axis=0)
    lse = np.log(np.exp(z - zmax).sum(axis=0)) + zmax
    picked = z[y, np.arange(n_vox)]
    data = np.asarray((lse - picked).mean(), dtype=z.dtype)

    def bw(g, grads):
        p = softmax(z, axis=0)
        p[y, np.arange(n_vox)] -= 1.0
        _accumulate(grads, logits, p * (float(g) / n_vox))

    return Tensor._result(data, (logits,), bw)


# -- backward driver -----------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor):
    """Backpropagate from a scalar; adds into ``grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward: expected a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tracked tensor")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, grads)
        else:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g


def parameters_like(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Convenience filter: the subset with requires_grad set."""
    return [t for t in tensors if t.requires_grad]
