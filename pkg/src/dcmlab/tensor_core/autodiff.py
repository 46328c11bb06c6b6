"""Dense tensors with reverse-mode differentiation over a fixed primitive set.

Every primitive records a backward closure when any input requires a
gradient; untracked computations build no graph at all. Forward results are
checked for NaN/Inf and raise :class:`NonFiniteError` at the op that produced
them.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = [np.float32]


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (float32 or float64)."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def _check(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


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


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("tensor-by-tensor division is not a primitive")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(_check(op, data))
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), back)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make("reshape", x.data.reshape(shape), (x,),
                 lambda g: (g.reshape(x.shape),))


def take(x: Tensor, idx) -> Tensor:
    """Slice or gather; the backward scatters with accumulation."""

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make("slice", x.data[idx], (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", y, (x,),
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; no affine parameters."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make("layernorm", xhat, (x,), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v * v * v)
    th = np.tanh(u)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du),)

    return _make("gelu", 0.5 * v * (1.0 + th), (x,), back)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make("silu", x.data * s, (x,),
                 lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


# ------------------------------------------------------------------ backward


def _topo(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, leaves: "Iterable[tuple[str, Tensor]] | None" = None) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) to every tracked leaf reachable from ``loss``.

    Leaves receive their gradient in ``.grad``. When ``leaves`` (name, tensor)
    pairs are given, a name -> gradient map is returned with zeros for leaves
    the loss does not reach.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    leaves = list(leaves) if leaves is not None else []
    for _, leaf in leaves:
        leaf.grad = None
    if loss.requires_grad:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(_topo(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in leaves if leaf.requires_grad}
