"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional backward closure. Calling
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into every reachable tensor's ``grad``.

Only the broadcasting patterns the layer stack actually needs are
supported; gradients of broadcast operands are reduced back to the
operand's shape. All data is float64 and immutable by convention after
construction.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeMismatchError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._prev = ()

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- graph machinery -----------------------------------------------

    def backward(self):
        """Backpropagate from a scalar; raises on non-scalar roots."""
        if self.size != 1:
            raise ShapeMismatchError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _make(np.add(self.data, other.data), (self, other))
        if out._prev:
            def bwd(g, a=self, b=other, out=out):
                _accumulate(a, _unbroadcast(g, a.data.shape))
                _accumulate(b, _unbroadcast(g, b.data.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        out = _make(np.subtract(self.data, other.data), (self, other))
        if out._prev:
            def bwd(g, a=self, b=other):
                _accumulate(a, _unbroadcast(g, a.data.shape))
                _accumulate(b, _unbroadcast(-g, b.data.shape))
            out._backward = bwd
        return out

    def __rsub__(self, other):
        return _as_tensor(other).__sub__(self)

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out._prev:
            def bwd(g, a=self):
                _accumulate(a, -g)
            out._backward = bwd
        return out

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _make(np.multiply(self.data, other.data), (self, other))
        if out._prev:
            def bwd(g, a=self, b=other):
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = _make(np.divide(self.data, other.data), (self, other))
        if out._prev:
            def bwd(g, a=self, b=other):
                _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
                _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other).__truediv__(self)

    def __pow__(self, exponent: float):
        out = _make(np.power(self.data, exponent), (self,))
        if out._prev:
            def bwd(g, a=self, p=float(exponent)):
                _accumulate(a, g * p * np.power(a.data, p - 1.0))
            out._backward = bwd
        return out

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeMismatchError(
                f"matmul expects 2-d operands, got {self.data.shape} @ {other.data.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeMismatchError(
                f"matmul inner dimensions disagree: {self.data.shape} @ {other.data.shape}"
            )
        out = _make(self.data @ other.data, (self, other))
        if out._prev:
            def bwd(g, a=self, b=other):
                _accumulate(a, g @ b.data.T)
                _accumulate(b, a.data.T @ g)
            out._backward = bwd
        return out

    # -- elementwise functions -------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = _make(y, (self,))
        if out._prev:
            def bwd(g, a=self, y=y):
                _accumulate(a, g * y)
            out._backward = bwd
        return out

    def log(self):
        out = _make(np.log(self.data), (self,))
        if out._prev:
            def bwd(g, a=self):
                _accumulate(a, g / a.data)
            out._backward = bwd
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = _make(y, (self,))
        if out._prev:
            def bwd(g, a=self, y=y):
                _accumulate(a, g * 0.5 / y)
            out._backward = bwd
        return out

    def leaky_relu(self, slope: float = 0.01):
        mask = self.data >= 0
        out = _make(np.where(mask, self.data, slope * self.data), (self,))
        if out._prev:
            def bwd(g, a=self, mask=mask, slope=slope):
                _accumulate(a, g * np.where(mask, 1.0, slope))
            out._backward = bwd
        return out

    def sigmoid(self):
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = _make(y, (self,))
        if out._prev:
            def bwd(g, a=self, y=y):
                _accumulate(a, g * y * (1.0 - y))
            out._backward = bwd
        return out

    def clip(self, lo: float, hi: float):
        """Clamp values; gradient passes through the interior only."""
        inside = (self.data > lo) & (self.data < hi)
        out = _make(np.clip(self.data, lo, hi), (self,))
        if out._prev:
            def bwd(g, a=self, inside=inside):
                _accumulate(a, g * inside)
            out._backward = bwd
        return out

    # -- reductions and reshaping ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._prev:
            def bwd(g, a=self, axis=axis, keepdims=keepdims):
                if axis is None:
                    _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
                else:
                    gg = g if keepdims else np.expand_dims(g, axis)
                    _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())
            out._backward = bwd
        return out

    def mean(self):
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,))
        if out._prev:
            def bwd(g, a=self):
                _accumulate(a, g.reshape(a.data.shape))
            out._backward = bwd
        return out

    def transpose(self, *axes):
        axes = axes or None
        out = _make(self.data.transpose(axes) if axes else self.data.T, (self,))
        if out._prev:
            if axes:
                inv = np.argsort(axes)
                def bwd(g, a=self, inv=tuple(inv)):
                    _accumulate(a, g.transpose(inv))
            else:
                def bwd(g, a=self):
                    _accumulate(a, g.T)
            out._backward = bwd
        return out

    def __getitem__(self, idx):
        out = _make(self.data[idx], (self,))
        if out._prev:
            def bwd(g, a=self, idx=idx):
                full = np.zeros_like(a.data)
                np.add.at(full, idx, g)
                _accumulate(a, full)
            out._backward = bwd
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        tracked = tuple(p for p in parents if p.requires_grad or p._prev)
        if tracked:
            out._prev = tracked
            out.requires_grad = True
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient over broadcast axes back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    out = _make(np.concatenate([p.data for p in parts], axis=axis), parts)
    if out._prev:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def bwd(g, parts=parts, offsets=offsets, axis=axis):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(p, g[tuple(sl)])
        out._backward = bwd
    return out


def stack_rows(tensors: Iterable[Tensor]) -> Tensor:
    """Stack 1-d tensors into a matrix (axis 0)."""
    parts = [_as_tensor(t) for t in tensors]
    out = _make(np.stack([p.data for p in parts], axis=0), parts)
    if out._prev:
        def bwd(g, parts=parts):
            for i, p in enumerate(parts):
                _accumulate(p, g[i])
        out._backward = bwd
    return out
