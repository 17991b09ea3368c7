"""Reverse-mode autodiff over float64 numpy arrays.

Small, deterministic engine: every operation records its parents and a
backward closure; ``Tensor.backward()`` runs the tape in reverse
topological order. All data is kept in double precision so analytic
gradients can be compared against central finite differences directly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from evret.errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(
        self,
        data,
        parents: Sequence["Tensor"] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = tuple(parents) if _grad_enabled else ()
        self._backward = backward if _grad_enabled else None
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    # -- graph ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, grad: np.ndarray) -> None:
        # Copy on first write: backward closures may hand the same array to
        # several parents, and later in-place += must not leak across them.
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = bw if _grad_enabled else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = bw if _grad_enabled else None
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = bw if _grad_enabled else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data / other.data, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape)
                )

        out._backward = bw if _grad_enabled else None
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        out = Tensor(self.data @ other.data, (self, other))
        a, b = self.data, other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(g @ b.swapaxes(-1, -2) if b.ndim > 1 else np.outer(g, b))
            if other.requires_grad:
                other._accumulate(a.swapaxes(-1, -2) @ g if a.ndim > 1 else np.outer(a, g))

        out._backward = bw if _grad_enabled else None
        return out

    def __pow__(self, p: float):
        out = Tensor(self.data**p, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * p * self.data ** (p - 1))

        out._backward = bw if _grad_enabled else None
        return out

    # -- elementwise --------------------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data), (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * out.data)

        out._backward = bw if _grad_enabled else None
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g / self.data)

        out._backward = bw if _grad_enabled else None
        return out

    def sqrt(self):
        out = Tensor(np.sqrt(self.data), (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / out.data)

        out._backward = bw if _grad_enabled else None
        return out

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), (self,))
        mask = self.data > 0

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        out._backward = bw if _grad_enabled else None
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        shape = self.data.shape

        def bw(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, shape).copy())

        out._backward = bw if _grad_enabled else None
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def max(self, axis: int, keepdims=False):
        """Maximum along ``axis``; gradient flows to the first argmax."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)
        out = Tensor(out_data, (self,))

        def bw(g):
            if not self.requires_grad:
                return
            grad = np.zeros_like(self.data)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(grad, np.expand_dims(idx, axis), gg, axis=axis)
            self._accumulate(grad)

        out._backward = bw if _grad_enabled else None
        return out

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(s, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))

        out._backward = bw if _grad_enabled else None
        return out

    def logsumexp(self, axis: int = -1, keepdims=False):
        m = self.data.max(axis=axis, keepdims=True)
        e = np.exp(self.data - m)
        se = e.sum(axis=axis, keepdims=True)
        out_data = m + np.log(se)
        soft = e / se
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)
        out = Tensor(out_data, (self,))

        def bw(g):
            if self.requires_grad:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(gg * soft)

        out._backward = bw if _grad_enabled else None
        return out

    # -- shape ------------------------------------------------------------------

    def __getitem__(self, key):
        out = Tensor(self.data[key], (self,))

        def bw(g):
            if self.requires_grad:
                grad = np.zeros_like(self.data)
                np.add.at(grad, key, g)
                self._accumulate(grad)

        out._backward = bw if _grad_enabled else None
        return out

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), (self,))
        orig = self.data.shape

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(orig))

        out._backward = bw if _grad_enabled else None
        return out

    def transpose(self, *axes):
        ax = axes if axes else None
        out = Tensor(self.data.transpose(ax), (self,))
        inv = np.argsort(ax) if ax else None

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.transpose(inv) if inv is not None else g.transpose())

        out._backward = bw if _grad_enabled else None
        return out

    @property
    def T(self):
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    out._backward = bw if _grad_enabled else None
    return out


def pad_rows(t: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad a [T x D] tensor along axis 0."""
    width = [(before, after)] + [(0, 0)] * (t.ndim - 1)
    out = Tensor(np.pad(t.data, width), (t,))
    n = t.data.shape[0]

    def bw(g):
        if t.requires_grad:
            t._accumulate(g[before : before + n])

    out._backward = bw if _grad_enabled else None
    return out


def vdot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two vectors as a scalar tensor."""
    return (a * b).sum()


def norm(a: Tensor, eps: float = 0.0) -> Tensor:
    """Euclidean norm of a vector; ``eps`` is added under the square root."""
    return ((a * a).sum() + eps).sqrt()


def cosine(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of two vectors with the denominator floored at eps."""
    denom = norm(a) * norm(b)
    if denom.item() < eps:
        denom = as_tensor(eps)
    return vdot(a, b) / denom
