"""Minimal reverse-mode autodiff over fp64 numpy arrays.

A :class:`Tensor` wraps a C-contiguous float64 array plus an optional
gradient accumulator and the closure that propagates its output gradient
to its parents.  Graphs are built eagerly by the functional ops below and
walked once, in reverse topological order, by :meth:`Tensor.backward`.

Scope is deliberately narrow: the set of primitives and the broadcasting
they support is exactly what the golden-noise network needs (elementwise
arithmetic with numpy-style broadcasting, batched matmul, reshape and
axis permutation, ReLU / tanh-GELU / softplus, last-axis softmax,
last-axis normalization, reductions).  Everything runs in float64 so
finite-difference checks have headroom.

Tensors are immutable after construction except during an explicit
optimizer step or a finite-difference probe; graphs are confined to one
thread per training step, while read-only sharing is safe.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError

__all__ = [
    "Tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "relu",
    "gelu",
    "softplus",
    "softmax",
    "normalize_last",
    "tsum",
    "mean",
    "mse",
    "grad_check",
    "softplus_inverse",
]


class Tensor:
    """Node in the autodiff graph; leaves have no parents."""

    __slots__ = ("data", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.copy(arr, order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) tensor."""
        if self.data.size != 1:
            raise ValueError("backward() expects a scalar output")
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # convenience arithmetic; the functional forms below do the work
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the gradient of a broadcast op back down to the operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b))

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = backward
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, parents=(a,))
    out._backward = lambda g: _accum(a, -g)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics; batch dimensions broadcast."""
    out = Tensor(np.matmul(a.data, b.data), parents=(a, b))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    out._backward = backward
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes), parents=(a,))
    out._backward = lambda g: _accum(a, np.transpose(g, inverse))
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out._backward = lambda g: _accum(a, g.reshape(old))
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0), parents=(a,))
    out._backward = lambda g: _accum(a, g * mask)
    return out


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t), parents=(a,))

    def backward(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        _accum(a, g * d)

    out._backward = backward
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable on both tails
    return np.logaddexp(0.0, x)


def softplus(a: Tensor) -> Tensor:
    out = Tensor(_softplus(a.data), parents=(a,))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-a.data))
        _accum(a, g * sig)

    out._backward = backward
    return out


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    """x with softplus(x) = y, y > 0; branch keeps both tails accurate."""
    y = np.maximum(np.asarray(y, dtype=np.float64), 1e-290)
    small = y < 1.0
    out = np.empty_like(y)
    out[small] = np.log(np.expm1(y[small]))
    out[~small] = y[~small] + np.log1p(-np.exp(-y[~small]))
    return out


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / np.sum(e, axis=-1, keepdims=True)
    out = Tensor(p, parents=(a,))

    def backward(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accum(a, p * (g - dot))

    out._backward = backward
    return out


def normalize_last(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis.

    The group-normalize primitive: callers reshape so each normalization
    group is the trailing axis.
    """
    x = a.data
    n = x.shape[-1]
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y, parents=(a,))

    def backward(g):
        gy = g * inv
        gm = np.mean(g, axis=-1, keepdims=True) * inv
        gv = np.sum(g * y, axis=-1, keepdims=True) * inv / n
        _accum(a, gy - gm - y * gv)

    out._backward = backward
    return out


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data), parents=(a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.data.shape).copy())
    return out


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor(np.mean(a.data), parents=(a,))
    out._backward = lambda g: _accum(a, np.broadcast_to(g / n, a.data.shape).copy())
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def grad_check(
    loss_fn: Callable[[Sequence[Tensor]], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between recorded and central-difference gradients.

    For every coordinate of every parameter: perturb by +-eps, evaluate the
    loss twice, and compare the two-sided slope with the gradient recorded
    by one backward pass.  Relative error is measured against
    max(1, |numeric|) so near-zero gradients are compared absolutely.
    """
    params = list(params)
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    for p in params:
        p.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn(params).data)
            flat[i] = orig - eps
            lo = float(loss_fn(params).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("loss is non-finite during finite differencing")
            numeric = (hi - lo) / (2.0 * eps)
            rel = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
    return worst
