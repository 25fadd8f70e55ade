"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable
operation records its parents and a closure mapping the output gradient to
one gradient per parent; :meth:`Tensor.backward` replays those closures in
reverse topological order and accumulates into leaf ``grad`` buffers.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from . import instrument

DEFAULT_DTYPE = np.float64

_grad_enabled = True
_debug = os.environ.get("MAMBA_ST_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def set_debug(flag: bool) -> None:
    """Toggle finite-value checks on every forward result."""
    global _debug
    _debug = bool(flag)


@contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _contiguous(a) -> np.ndarray:
    # np.ascontiguousarray promotes 0-d arrays to 1-d, so copy by hand
    a = np.asarray(a)
    return a if a.flags.c_contiguous else a.copy(order="C")


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) and dtype is None:
        return _contiguous(data)
    return _contiguous(np.asarray(data, dtype=dtype or DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, flops: int = 0) -> "Tensor":
        """Wrap an op result, linking it into the graph when any parent needs grad.

        ``backward`` receives the output gradient and returns one gradient (or
        None) per parent, already reduced to that parent's shape.
        """
        if flops:
            instrument.add_flops(flops)
        out = cls.__new__(cls)
        out.data = _contiguous(data)
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        if _debug and not np.all(np.isfinite(out.data)):
            if all(np.all(np.isfinite(p.data)) for p in parents):
                raise FloatingPointError("non-finite value produced from finite inputs")
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators ---------------------------------------------------------
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = _wrap(b, a)
    else:
        b = _wrap(b)
        a = _wrap(a, b)
    return a, b


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- binary elementwise -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_shape = _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor.from_op(a.data + b.data, (a, b), backward, flops=int(np.prod(out_shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_shape = _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor.from_op(a.data - b.data, (a, b), backward, flops=int(np.prod(out_shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_shape = _broadcast_shape(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor.from_op(a.data * b.data, (a, b), backward, flops=int(np.prod(out_shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_shape = _broadcast_shape(a, b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor.from_op(out, (a, b), backward, flops=int(np.prod(out_shape)))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_shape = _broadcast_shape(a, b)
    mask = a.data >= b.data

    def backward(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return Tensor.from_op(np.where(mask, a.data, b.data), (a, b), backward,
                          flops=int(np.prod(out_shape)))


# -- unary elementwise -------------------------------------------------------

def _unary(x: Tensor, out: np.ndarray, dfdx: Callable[[], np.ndarray], cost: int = 1) -> Tensor:
    def backward(g):
        return (g * dfdx(),)

    return Tensor.from_op(out, (x,), backward, flops=cost * x.size)


def neg(x: Tensor) -> Tensor:
    return Tensor.from_op(-x.data, (x,), lambda g: (-g,), flops=x.size)


def power(x: Tensor, exponent: float) -> Tensor:
    x = _wrap(x)
    return _unary(x, x.data ** exponent, lambda: exponent * x.data ** (exponent - 1))


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)
    return _unary(x, out, lambda: out)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    return _unary(x, np.log(x.data), lambda: 1.0 / x.data)


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = np.sqrt(x.data)
    return _unary(x, out, lambda: 0.5 / out)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = _sigmoid(x.data)
    return _unary(x, out, lambda: out * (1.0 - out))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), evaluated without overflow."""
    x = _wrap(x)
    return _unary(x, np.logaddexp(0.0, x.data), lambda: _sigmoid(x.data), cost=2)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0.0).astype(x.dtype), lambda: mask)


def silu(x: Tensor) -> Tensor:
    x = _wrap(x)
    s = _sigmoid(x.data)
    return _unary(x, x.data * s, lambda: s * (1.0 + x.data * (1.0 - s)), cost=2)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    inside = (x.data > lo) & (x.data < hi)
    return _unary(x, np.clip(x.data, lo, hi), lambda: inside)


# -- reductions and shape ops -----------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), backward, flops=x.size)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) / float(count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(x.data, axes), (x,),
                          lambda g: (_contiguous(np.transpose(g, inverse)),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather entries along ``axis``; bijective index maps get a cheap inverse."""
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    n = x.shape[axis]
    if idx.ndim != 1 or (idx.size and (idx.min() < -n or idx.max() >= n)):
        raise ShapeError(f"index out of range for axis {axis} of shape {x.shape}")
    idx = idx % n if idx.size else idx
    bijective = idx.size == n and np.array_equal(np.sort(idx), np.arange(n))

    def backward(g):
        if bijective:
            return (np.take(g, np.argsort(idx), axis=axis),)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return Tensor.from_op(np.take(x.data, idx, axis=axis), (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return Tensor.from_op(out, tensors, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(_contiguous(part) for part in np.split(g, bounds, axis=ax))

    return Tensor.from_op(out, tensors, backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(out, (a, b), backward, flops=2 * out.size * a.shape[-1])


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


class Module:
    """Container whose Tensor attributes marked ``requires_grad`` are parameters.

    Child modules and lists of modules are walked in attribute insertion order,
    so parameter names are stable dotted paths.
    """

    def named_tensors(self, prefix: str = "", frozen: bool = False) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad or frozen:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_tensors(path + ".", frozen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{path}.{i}.", frozen)
                    elif isinstance(item, Tensor) and (item.requires_grad or frozen):
                        yield f"{path}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return self.named_tensors(prefix)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
