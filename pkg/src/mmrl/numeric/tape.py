"""Reverse-mode gradients over numpy arrays.

Every op below accepts plain arrays or `Var`s. Without a `Var` among its inputs
an op is an ordinary numpy call; otherwise the result is recorded on the tape
the inputs belong to. Model code is written once and runs both ways.
"""
from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

from ..errors import UsageError

Vjp = Callable[[np.ndarray], np.ndarray]


class Tape:
    """Append-only record of a computation, replayed backwards by `grad_backward`."""

    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def watch(self, value: Any, name: str | None = None) -> "Var":
        leaf = Var(np.array(value, dtype=np.float64), self, (), name=name)
        leaf.index = len(self.nodes)
        self.nodes.append(leaf)
        return leaf

    def record(self, value: np.ndarray, parents: tuple[tuple["Var", Vjp], ...]) -> "Var":
        node = Var(value, self, parents)
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    # numpy must hand mixed expressions (ndarray op Var) back to Var's reflected ops
    __array_ufunc__ = None
    __slots__ = ("value", "tape", "parents", "name", "index")

    def __init__(
        self,
        value: np.ndarray,
        tape: Tape,
        parents: tuple[tuple["Var", Vjp], ...],
        name: str | None = None,
    ) -> None:
        self.value = value
        self.tape = tape
        self.parents = parents
        self.name = name
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __len__(self) -> int:
        return len(self.value)

    def __add__(self, other: Any) -> "Var":
        return add(self, other)

    def __radd__(self, other: Any) -> "Var":
        return add(other, self)

    def __sub__(self, other: Any) -> "Var":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Var":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Var":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Var":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Var":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Var":
        return div(other, self)

    def __neg__(self) -> "Var":
        return neg(self)

    def __pow__(self, exponent: float) -> "Var":
        return power(self, exponent)

    def __matmul__(self, other: Any) -> "Var":
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> "Var":
        return matmul(other, self)

    def __getitem__(self, index: Any) -> "Var":
        return take(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Var":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Var":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"


def value_of(x: Any) -> np.ndarray:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def is_traced(*xs: Any) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _record(out: np.ndarray, *links: tuple[Any, Vjp]) -> Any:
    traced = tuple((x, fn) for x, fn in links if isinstance(x, Var))
    if not traced:
        return out
    tape = traced[0][0].tape
    if any(x.tape is not tape for x, _ in traced):
        raise UsageError("cannot mix variables from different tapes")
    return tape.record(out, traced)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a: Any, b: Any) -> Any:
    av, bv = value_of(a), value_of(b)
    return _record(
        av + bv,
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    )


def sub(a: Any, b: Any) -> Any:
    av, bv = value_of(a), value_of(b)
    return _record(
        av - bv,
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    )


def mul(a: Any, b: Any) -> Any:
    av, bv = value_of(a), value_of(b)
    return _record(
        av * bv,
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    )


def div(a: Any, b: Any) -> Any:
    av, bv = value_of(a), value_of(b)
    return _record(
        av / bv,
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def neg(a: Any) -> Any:
    av = value_of(a)
    return _record(-av, (a, lambda g: -g))


def power(a: Any, exponent: float) -> Any:
    av = value_of(a)
    return _record(av**exponent, (a, lambda g: g * exponent * av ** (exponent - 1)))


def tanh(a: Any) -> Any:
    out = np.tanh(value_of(a))
    return _record(out, (a, lambda g: g * (1.0 - out * out)))


def relu(a: Any) -> Any:
    av = value_of(a)
    return _record(np.maximum(av, 0.0), (a, lambda g: g * (av > 0.0)))


def exp(a: Any) -> Any:
    out = np.exp(value_of(a))
    return _record(out, (a, lambda g: g * out))


def log(a: Any) -> Any:
    av = value_of(a)
    return _record(np.log(av), (a, lambda g: g / av))


def sqrt(a: Any) -> Any:
    out = np.sqrt(value_of(a))
    return _record(out, (a, lambda g: g * 0.5 / out))


def maximum(a: Any, b: Any) -> Any:
    av, bv = value_of(a), value_of(b)
    pick_a = av >= bv
    return _record(
        np.maximum(av, bv),
        (a, lambda g: _unbroadcast(g * pick_a, av.shape)),
        (b, lambda g: _unbroadcast(g * ~pick_a, bv.shape)),
    )


def minimum(a: Any, b: Any) -> Any:
    av, bv = value_of(a), value_of(b)
    pick_a = av <= bv
    return _record(
        np.minimum(av, bv),
        (a, lambda g: _unbroadcast(g * pick_a, av.shape)),
        (b, lambda g: _unbroadcast(g * ~pick_a, bv.shape)),
    )


def clip(a: Any, low: float, high: float) -> Any:
    av = value_of(a)
    inside = (av >= low) & (av <= high)
    return _record(np.clip(av, low, high), (a, lambda g: g * inside))


# linear algebra


def matmul(a: Any, b: Any) -> Any:
    av, bv = value_of(a), value_of(b)
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv

    def lift(g: np.ndarray) -> np.ndarray:
        if av.ndim == 1:
            g = np.expand_dims(g, -2)
        if bv.ndim == 1:
            g = np.expand_dims(g, -1)
        return g

    def grad_a(g: np.ndarray) -> np.ndarray:
        ga = lift(g) @ np.swapaxes(b2, -1, -2)
        if av.ndim == 1:
            ga = ga[..., 0, :]
        return _unbroadcast(ga, av.shape)

    def grad_b(g: np.ndarray) -> np.ndarray:
        gb = np.swapaxes(a2, -1, -2) @ lift(g)
        if bv.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(gb, bv.shape)

    return _record(av @ bv, (a, grad_a), (b, grad_b))


def einsum(subscripts: str, a: Any, b: Any) -> Any:
    """Two-operand einsum. Every index of an operand must appear in the output
    or in the other operand."""
    inputs, out_sub = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = inputs.split(",")
    for own, other in ((a_sub, b_sub), (b_sub, a_sub)):
        if len(set(own)) != len(own) or any(c not in out_sub and c not in other for c in own):
            raise UsageError(f"unsupported einsum subscripts '{subscripts}'")
    av, bv = value_of(a), value_of(b)
    return _record(
        np.einsum(subscripts, av, bv),
        (a, lambda g: np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, bv)),
        (b, lambda g: np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, av)),
    )


# shape


def reshape(a: Any, shape: Sequence[int]) -> Any:
    av = value_of(a)
    return _record(av.reshape(shape), (a, lambda g: g.reshape(av.shape)))


def transpose(a: Any, axes: Sequence[int] | None = None) -> Any:
    av = value_of(a)
    order = tuple(range(av.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(order))
    return _record(av.transpose(order), (a, lambda g: g.transpose(inverse)))


def take(a: Any, index: Any) -> Any:
    av = value_of(a)

    def scatter(g: np.ndarray) -> np.ndarray:
        out = np.zeros_like(av)
        np.add.at(out, index, g)
        return out

    return _record(av[index], (a, scatter))


def concat(parts: Sequence[Any], axis: int = 0) -> Any:
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def piece(i: int) -> Vjp:
        return lambda g: np.split(g, bounds, axis=axis)[i]

    return _record(out, *((p, piece(i)) for i, p in enumerate(parts)))


def stack(parts: Sequence[Any], axis: int = 0) -> Any:
    values = [value_of(p) for p in parts]

    def piece(i: int) -> Vjp:
        return lambda g: np.take(g, i, axis=axis)

    return _record(np.stack(values, axis=axis), *((p, piece(i)) for i, p in enumerate(parts)))


# reductions


def _expand_to(g: np.ndarray, shape: tuple[int, ...], axis: Any, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(sorted(ax % len(shape) for ax in axes))
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Any:
    av = value_of(a)
    out = np.asarray(av.sum(axis=axis, keepdims=keepdims))
    return _record(out, (a, lambda g: _expand_to(g, av.shape, axis, keepdims)))


def reduce_mean(a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Any:
    av = value_of(a)
    count = av.size if axis is None else int(np.prod([av.shape[ax] for ax in np.atleast_1d(axis)]))
    return div(reduce_sum(a, axis=axis, keepdims=keepdims), float(count))


# normalisation


def softmax(a: Any, axis: int = -1) -> Any:
    av = value_of(a)
    shifted = np.exp(av - av.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)
    return _record(out, (a, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True))))


def layer_norm(x: Any, gain: Any, offset: Any, eps: float = 1e-5) -> Any:
    xv, gv, ov = value_of(x), value_of(gain), value_of(offset)
    mu = xv.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(xv.var(axis=-1, keepdims=True) + eps)
    xhat = (xv - mu) * inv_std

    def grad_x(g: np.ndarray) -> np.ndarray:
        gh = g * gv
        return inv_std * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )

    return _record(
        xhat * gv + ov,
        (x, grad_x),
        (gain, lambda g: _unbroadcast(g * xhat, gv.shape)),
        (offset, lambda g: _unbroadcast(g, ov.shape)),
    )


def grad_backward(
    tape: Tape, output: Any, wrt: Sequence[Var] | None = None
) -> dict[Var, np.ndarray]:
    """Gradients of a scalar `output` for every watched leaf on `tape` (or just `wrt`)."""
    if not isinstance(output, Var) or output.tape is not tape:
        raise UsageError("backward needs a scalar recorded on this tape")
    if output.value.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.value.shape}")

    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    leaves: list[Var] = []
    for node in reversed(tape.nodes[: output.index + 1]):
        if node.is_leaf:
            leaves.append(node)
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contribution = vjp(g)
            key = id(parent)
            grads[key] = contribution if key not in grads else grads[key] + contribution

    targets = leaves if wrt is None else list(wrt)
    return {v: grads.get(id(v), np.zeros_like(v.value)) for v in targets}
