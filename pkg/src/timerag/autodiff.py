"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Tape-free graph: every Tensor records its parents and a grad function that
maps the upstream gradient to per-parent contributions. `backward` runs a
topological sweep. Only the operations the encoder and losses need are
implemented; everything is 64-bit and deterministic.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "grad_fn", "requires_grad")

    def __init__(self, value, parents=(), grad_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def einsum(subscripts: str, a, b) -> Tensor:
    """Binary einsum; gradients obtained by transposing the subscripts.

    Every index of each operand must appear in the output or the other
    operand, which holds for all contractions used here.
    """
    a, b = as_tensor(a), as_tensor(b)
    ins, out = subscripts.split("->")
    in_a, in_b = ins.split(",")

    def grad_fn(g):
        ga = np.einsum(f"{out},{in_b}->{in_a}", g, b.value)
        gb = np.einsum(f"{out},{in_a}->{in_b}", g, a.value)
        return ga, gb

    return Tensor(np.einsum(subscripts, a.value, b.value), (a, b), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.value.size
    else:
        count = int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_value = np.exp(a.value)
    return Tensor(out_value, (a,), lambda g: (g * out_value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.value**p, (a,), lambda g: (g * p * a.value ** (p - 1),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    out_value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return Tensor(out_value, (a,), lambda g: (g * out_value * (1.0 - out_value),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    return Tensor(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    se = e.sum(axis=axis, keepdims=True)
    out_value = np.squeeze(np.log(se) + m, axis=axis)

    def grad_fn(g):
        return (np.expand_dims(g, axis) * (e / se),)

    return Tensor(out_value, (a,), grad_fn)


def take_along_last(a, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    picked = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        z = np.zeros_like(a.value)
        np.put_along_axis(z, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (z,)

    return Tensor(picked, (a,), grad_fn)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable Tensor."""
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.grad_fn is None or node.grad is None:
            continue
        grads = node.grad_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            g = np.asarray(g, dtype=np.float64)
            p.grad = g.copy() if p.grad is None else p.grad + g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None
