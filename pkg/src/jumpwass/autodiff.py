"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to its :class:`Var` objects in
creation order, which is already a topological order. ``Tape.backward`` walks
the record once in reverse and accumulates adjoints.

The module-level helpers (:func:`relu`, :func:`sqrt_abs`, :func:`exp`,
:func:`stack`, ...) accept either plain arrays or ``Var`` objects, so the same
coefficient code runs untaped (data generation) and taped (training).
"""
from __future__ import annotations

from typing import Callable, Hashable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


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


class Var:
    __slots__ = ("tape", "index", "value")
    __array_priority__ = 100.0

    def __init__(self, tape: Tape, index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(#{self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is recorded")
        return mul(self, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations.

    Each entry holds the parent indices and a closure mapping the output
    adjoint to a tuple of parent adjoints. Leaves registered through
    :meth:`leaf` carry a key and are the only nodes reported by
    :meth:`backward`.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._pullbacks: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self.leaves: dict[Hashable, int] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def _push(self, value, parents: tuple[int, ...], pullback) -> Var:
        value = np.asarray(value, dtype=float)
        self._parents.append(parents)
        self._pullbacks.append(pullback)
        self._shapes.append(value.shape)
        return Var(self, len(self._parents) - 1, value)

    def leaf(self, value, key: Hashable) -> Var:
        if key in self.leaves:
            raise TapeError(f"duplicate leaf key {key!r}")
        var = self._push(np.array(value, dtype=float), (), None)
        self.leaves[key] = var.index
        return var

    def constant(self, value) -> Var:
        return self._push(value, (), None)

    def backward(self, output: Var, seed_gradient=None) -> dict[Hashable, np.ndarray]:
        """Reverse accumulation from ``output``; returns adjoints of every leaf.

        Leaves that do not influence ``output`` receive zero arrays, so the
        result always has one entry per registered leaf.
        """
        if output.tape is not self:
            raise TapeError("output was recorded on a different tape")
        if seed_gradient is None:
            if output.value.size != 1:
                raise TapeError("seed gradient required for non-scalar output")
            seed_gradient = np.ones_like(output.value)
        adj: list[np.ndarray | None] = [None] * len(self._parents)
        adj[output.index] = np.broadcast_to(
            np.asarray(seed_gradient, dtype=float), output.value.shape
        ).copy()
        for i in range(output.index, -1, -1):
            g = adj[i]
            if g is None or not self._parents[i]:
                continue
            grads = self._pullbacks[i](g)
            for p, gp in zip(self._parents[i], grads):
                if gp is None:
                    continue
                if adj[p] is None:
                    adj[p] = gp
                else:
                    adj[p] = adj[p] + gp
            if i != output.index:
                adj[i] = None
        out = {}
        for key, idx in self.leaves.items():
            g = adj[idx]
            out[key] = np.zeros(self._shapes[idx]) if g is None else np.asarray(g)
        return out


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise TapeError("mixing variables from different tapes")
        return x
    return tape.constant(x)


# -- primitives --------------------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return a + b
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape._push(
        a.value + b.value,
        (a.index, b.index),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a):
    if not isinstance(a, Var):
        return -a
    return a.tape._push(-a.value, (a.index,), lambda g: (-g,))


def mul(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return a * b
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._push(
        av * bv,
        (a.index, b.index),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return a / b
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape._push(
        out,
        (a.index, b.index),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def matmul(a, b):
    """2-D matrix product (batch rows times weight matrix)."""
    tape = _tape_of(a, b)
    if tape is None:
        return a @ b
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise TapeError("matmul is recorded for 2-D operands only")
    return tape._push(av @ bv, (a.index, b.index), lambda g: (g @ bv.T, av.T @ g))


def relu(a):
    if not isinstance(a, Var):
        return np.maximum(a, 0.0)
    mask = a.value > 0
    return a.tape._push(np.where(mask, a.value, 0.0), (a.index,), lambda g: (g * mask,))


def sqrt_abs(a):
    """``sqrt(|a|)``; the derivative at exactly zero is taken as 0."""
    if not isinstance(a, Var):
        return np.sqrt(np.abs(a))
    av = a.value
    out = np.sqrt(np.abs(av))
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(av == 0.0, 0.0, np.sign(av) / (2.0 * out))
    return a.tape._push(out, (a.index,), lambda g: (g * d,))


def exp(a):
    if not isinstance(a, Var):
        return np.exp(a)
    out = np.exp(a.value)
    return a.tape._push(out, (a.index,), lambda g: (g * out,))


def absolute(a):
    if not isinstance(a, Var):
        return np.abs(a)
    s = np.sign(a.value)
    return a.tape._push(np.abs(a.value), (a.index,), lambda g: (g * s,))


def square(a):
    return mul(a, a)


def vsum(a, axis=None):
    if not isinstance(a, Var):
        return np.sum(a, axis=axis)
    shape = a.shape

    def pullback(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape._push(np.sum(a.value, axis=axis), (a.index,), pullback)


def mean(a, axis=None):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return vsum(a, axis) * (1.0 / n)


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.shape
    return a.tape._push(a.value.reshape(shape), (a.index,), lambda g: (g.reshape(old),))


def take(a, key):
    """Basic or fancy indexing; repeated indices accumulate on the way back."""
    if not isinstance(a, Var):
        return a[key]
    shape = a.shape

    def pullback(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return a.tape._push(a.value[key], (a.index,), pullback)


def stack(items: Sequence, axis: int = 0):
    tape = _tape_of(*items)
    if tape is None:
        return np.stack(items, axis=axis)
    vs = [_lift(tape, x) for x in items]

    def pullback(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(vs)))

    return tape._push(
        np.stack([v.value for v in vs], axis=axis), tuple(v.index for v in vs), pullback
    )


def concatenate(items: Sequence, axis: int = -1):
    tape = _tape_of(*items)
    if tape is None:
        return np.concatenate(items, axis=axis)
    vs = [_lift(tape, x) for x in items]
    sizes = [v.shape[axis] for v in vs]
    cuts = np.cumsum(sizes)[:-1]

    def pullback(g):
        return tuple(np.split(g, cuts, axis=axis))

    return tape._push(
        np.concatenate([v.value for v in vs], axis=axis),
        tuple(v.index for v in vs),
        pullback,
    )


def broadcast_to(a, shape):
    if not isinstance(a, Var):
        return np.broadcast_to(a, shape)
    old = a.shape
    return a.tape._push(
        np.broadcast_to(a.value, shape).copy(), (a.index,), lambda g: (_unbroadcast(g, old),)
    )
