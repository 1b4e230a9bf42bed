"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape: every operation builds a child ``Tensor`` holding a closure
that maps the child's output gradient to gradients for its parents.
``Tensor.backward()`` walks the graph in reverse topological order.

All arithmetic is float64. Gradients accumulate by summation, so a tensor
used in several places receives the correct total derivative. Broadcasting
follows numpy semantics; gradients are sum-reduced back to parent shapes.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

Array = np.ndarray


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum-reduce ``grad`` so it matches ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp

    # -- basics ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph -------------------------------------------------------------

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate gradients of this node into every ancestor.

        ``grad`` defaults to 1.0 and is only optional for scalar outputs.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            parent_grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.data.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out = Tensor(
            self.data + other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
            _vjp=lambda g: (g, g),
        )
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor(
            -self.data,
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (-g,),
        )

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        return Tensor(
            self.data - other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
            _vjp=lambda g: (g, -g),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a * b,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
            _vjp=lambda g: (g * b, g * a),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor(
            a / b,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
            _vjp=lambda g: (g / b, -g * a / (b * b)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not np.isscalar(exponent):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        return Tensor(
            a**exponent,
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (g * exponent * a ** (exponent - 1),),
        )

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul requires operands with ndim >= 2")

        def vjp(g: Array):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return ga, gb

        return Tensor(
            a @ b,
            requires_grad=self.requires_grad or other.requires_grad,
            _parents=(self, other),
            _vjp=vjp,
        )

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        return Tensor(
            self.data.reshape(shape),
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (g.reshape(old),),
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = tuple(int(i) for i in np.argsort(axes))
        return Tensor(
            self.data.transpose(axes),
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (g.transpose(inverse),),
        )

    def take(self, indices, axis: int = 0) -> "Tensor":
        """Gather along ``axis``; the backward pass scatter-adds."""
        idx = np.asarray(indices, dtype=np.intp)
        src_shape = self.data.shape

        def vjp(g: Array):
            gx = np.zeros(src_shape, dtype=np.float64)
            moved = np.moveaxis(gx, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
            return (gx,)

        return Tensor(
            np.take(self.data, idx, axis=axis),
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=vjp,
        )

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src_shape = self.data.shape

        def vjp(g: Array):
            if axis is None:
                return (np.broadcast_to(g, src_shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, src_shape).copy(),)

        return Tensor(
            self.data.sum(axis=axis, keepdims=keepdims),
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=vjp,
        )

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise ----------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = (self.data > 0).astype(np.float64)
        return Tensor(
            self.data * mask,
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (g * mask,),
        )

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor(
            y,
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (g * y,),
        )

    def log(self) -> "Tensor":
        a = self.data
        return Tensor(
            np.log(a),
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (g / a,),
        )

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        return Tensor(
            y,
            requires_grad=self.requires_grad,
            _parents=(self,),
            _vjp=lambda g: (g * 0.5 / y,),
        )


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A leaf that never receives gradient."""
    return Tensor(np.asarray(x, dtype=np.float64))


def parameter(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        requires_grad=any(t.requires_grad for t in tensors),
        _parents=tuple(tensors),
        _vjp=vjp,
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax with an exact fused backward pass."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: Array):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return Tensor(y, requires_grad=x.requires_grad, _parents=(x,), _vjp=vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale + shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    y = xhat * gain.data + bias.data
    reduce_axes = tuple(range(x.data.ndim - 1))

    def vjp(g: Array):
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return Tensor(
        y,
        requires_grad=x.requires_grad or gain.requires_grad or bias.requires_grad,
        _parents=(x, gain, bias),
        _vjp=vjp,
    )


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) computed with a detached max shift (gradient is exact)."""
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x - constant(m)
    out = shifted.exp().sum(axis=axis, keepdims=True).log() + constant(m)
    if not keepdims:
        out = out.reshape(tuple(np.delete(out.data.shape, axis % x.data.ndim)))
    return out


def check_finite(x: Tensor | Array, context: str) -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {context}")
