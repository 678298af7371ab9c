"""Tape-based reverse-mode differentiation over dense float64 arrays.

A small closed set of primitives covers everything the sequence models
need.  Every primitive returns its forward value together with a pullback
mapping an output cotangent to exact input cotangents, so gradient checks
against finite differences can be exhaustive.

One tape is active at a time.  Operations executed while a tape is active
are recorded; without an active tape the same code runs as plain forward
evaluation (used everywhere gradients are not needed).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class DomainError(ValueError):
    """Input outside a primitive's domain (e.g. log of a non-positive)."""


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """Dense float64 array participating in taped computations."""

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = _as_value(value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor({self.value!r})"

    # arithmetic sugar; constants are lifted automatically
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return affine(self, scale=-1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return affine(self, scale=1.0 / other)
        return div(self, other)


class Parameter(Tensor):
    """Named leaf tensor with a gradient accumulator."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value):
        super().__init__(value)
        self.name = name
        self.grad: np.ndarray | None = np.zeros_like(self.value)

    def reset_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


_ACTIVE: "Tape | None" = None


class Tape:
    """Records operations for one backward pass.

    Only subgraphs reachable from a Parameter are recorded; constant
    subcomputations are skipped entirely.
    """

    __slots__ = ("_records", "_tracked")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._tracked: set[int] = set()

    def __enter__(self):
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a gradient tape is already active")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def __len__(self):
        return len(self._records)

    def _tracks(self, t: Tensor) -> bool:
        return isinstance(t, Parameter) or id(t) in self._tracked


def backward(tape: Tape, output: Tensor, seed=None) -> dict[int, np.ndarray]:
    """Accumulate d(output)/d(leaf) into Parameter.grad for every parameter
    on the tape.  Returns the full cotangent map keyed by id(tensor).

    Gradient accumulation is additive: running backward for two losses in
    sequence leaves the sum of their gradients in .grad.
    """
    if seed is None:
        seed = np.ones_like(output.value)
    cot: dict[int, np.ndarray] = {id(output): _as_value(seed)}
    seen_params: dict[int, Parameter] = {}
    for out, inputs, pullback in reversed(tape._records):
        g = cot.get(id(out))
        if g is None:
            continue
        needs = tuple(tape._tracks(t) for t in inputs)
        grads = pullback(g, needs)
        for t, need, gi in zip(inputs, needs, grads):
            if not need or gi is None:
                continue
            key = id(t)
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = gi
            if isinstance(t, Parameter):
                seen_params[key] = t
    for key, p in seen_params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.value)
        p.grad += np.broadcast_to(cot[key], p.value.shape)
    return cot


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast cotangent back down to the original input shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives: forward value + exact pullback.
# ---------------------------------------------------------------------------

_EXP_MAX = 709.0  # exp overflows float64 just above this


def _p_add(a, b):
    value = a + b
    sa, sb = a.shape, b.shape

    def pullback(g, needs=None):
        na, nb = (True, True) if needs is None else needs
        return (_unbroadcast(g, sa) if na else None,
                _unbroadcast(g, sb) if nb else None)

    return value, pullback


def _p_multiply(a, b):
    value = a * b
    sa, sb = a.shape, b.shape

    def pullback(g, needs=None):
        na, nb = (True, True) if needs is None else needs
        return (_unbroadcast(g * b, sa) if na else None,
                _unbroadcast(g * a, sb) if nb else None)

    return value, pullback


def _p_matmul(a, b):
    value = a @ b

    def pullback(g, needs=None):
        na, nb = (True, True) if needs is None else needs
        ga = gb = None
        if a.ndim == 2 and b.ndim == 2:
            if na:
                ga = g @ b.T
            if nb:
                gb = a.T @ g
        elif a.ndim == 1 and b.ndim == 2:
            if na:
                ga = b @ g
            if nb:
                gb = np.outer(a, g)
        elif a.ndim == 2 and b.ndim == 1:
            if na:
                ga = np.outer(g, b)
            if nb:
                gb = a.T @ g
        else:  # 1-D dot
            if na:
                ga = g * b
            if nb:
                gb = g * a
        return ga, gb

    return value, pullback


def _p_exp(a):
    if a.size and np.max(a) > _EXP_MAX:
        idx = int(np.argmax(a))
        raise DomainError(f"exp: input at flat index {idx} overflows float64")
    value = np.exp(a)

    def pullback(g, needs=None):
        return (g * value,)

    return value, pullback


def _p_log(a):
    if a.size and not np.all(a > 0.0):
        idx = int(np.flatnonzero(~(a > 0.0).ravel())[0])
        raise DomainError(f"log: non-positive input at flat index {idx}")
    value = np.log(a)

    def pullback(g, needs=None):
        return (g / a,)

    return value, pullback


def _p_tanh(a):
    value = np.tanh(a)

    def pullback(g, needs=None):
        return (g * (1.0 - value * value),)

    return value, pullback


def _p_sigmoid(a):
    value = expit(a)

    def pullback(g, needs=None):
        return (g * value * (1.0 - value),)

    return value, pullback


def _p_softplus(a):
    value = np.logaddexp(0.0, a)

    def pullback(g, needs=None):
        return (g * expit(a),)

    return value, pullback


def _p_relu(a):
    value = np.maximum(a, 0.0)

    def pullback(g, needs=None):
        return (g * (a > 0.0),)

    return value, pullback


def _p_sum(a, axis=None, keepdims=False):
    value = np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape

    def pullback(g, needs=None):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return value, pullback


def _p_logsumexp(a, axis=None, keepdims=False):
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    shifted = np.exp(a - amax)
    total = np.sum(shifted, axis=axis, keepdims=True)
    value = np.log(total) + amax
    softmax = shifted / total
    if not keepdims:
        value = np.squeeze(value, axis=axis) if axis is not None else value.reshape(())

    def pullback(g, needs=None):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * softmax,)

    return value, pullback


def _p_concatenate(*parts, axis=0):
    value = np.concatenate(parts, axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def pullback(g, needs=None):
        offsets = np.cumsum([0] + sizes)
        out = []
        for i in range(len(sizes)):
            if needs is not None and not needs[i]:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return value, pullback


def _p_slice(a, key=()):
    value = a[key].copy()
    shape = a.shape

    def pullback(g, needs=None):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return value, pullback


def _p_affine(a, scale=1.0, shift=0.0):
    value = scale * a + shift

    def pullback(g, needs=None):
        return (g * scale,)

    return value, pullback


PRIMITIVES = {
    "matmul": _p_matmul,
    "add": _p_add,
    "multiply": _p_multiply,
    "exp": _p_exp,
    "log": _p_log,
    "tanh": _p_tanh,
    "sigmoid": _p_sigmoid,
    "softplus": _p_softplus,
    "relu": _p_relu,
    "sum": _p_sum,
    "log-sum-exp": _p_logsumexp,
    "concatenate": _p_concatenate,
    "slice": _p_slice,
    "elementwise-affine": _p_affine,
}


def primitive_forward_backward(name: str, *inputs, **params):
    """Evaluate a primitive by name on raw arrays.

    Returns (value, pullback) where pullback maps an output cotangent to
    the tuple of input cotangents.
    """
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        known = ", ".join(sorted(PRIMITIVES))
        raise DomainError(f"unknown primitive {name!r}; known: {known}") from None
    arrays = tuple(_as_value(x) for x in inputs)
    return fn(*arrays, **params)


# ---------------------------------------------------------------------------
# Tape-aware operations on Tensors.
# ---------------------------------------------------------------------------


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(fn, inputs: tuple[Tensor, ...], **params) -> Tensor:
    value, pullback = fn(*(t.value for t in inputs), **params)
    out = Tensor(value)
    tape = _ACTIVE
    if tape is not None and any(tape._tracks(t) for t in inputs):
        tape._records.append((out, inputs, pullback))
        tape._tracked.add(id(out))
    return out


def add(a, b) -> Tensor:
    return _apply(_p_add, (_lift(a), _lift(b)))


def mul(a, b) -> Tensor:
    return _apply(_p_multiply, (_lift(a), _lift(b)))


def matmul(a, b) -> Tensor:
    return _apply(_p_matmul, (_lift(a), _lift(b)))


def exp(a) -> Tensor:
    return _apply(_p_exp, (_lift(a),))


def log(a) -> Tensor:
    return _apply(_p_log, (_lift(a),))


def tanh(a) -> Tensor:
    return _apply(_p_tanh, (_lift(a),))


def sigmoid(a) -> Tensor:
    return _apply(_p_sigmoid, (_lift(a),))


def softplus(a) -> Tensor:
    return _apply(_p_softplus, (_lift(a),))


def relu(a) -> Tensor:
    return _apply(_p_relu, (_lift(a),))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    return _apply(_p_sum, (_lift(a),), axis=axis, keepdims=keepdims)


def logsumexp(a, axis=None, keepdims=False) -> Tensor:
    return _apply(_p_logsumexp, (_lift(a),), axis=axis, keepdims=keepdims)


def concat(parts, axis=0) -> Tensor:
    return _apply(_p_concatenate, tuple(_lift(p) for p in parts), axis=axis)


def slice_(a, key) -> Tensor:
    return _apply(_p_slice, (_lift(a),), key=key)


def affine(a, scale=1.0, shift=0.0) -> Tensor:
    return _apply(_p_affine, (_lift(a),), scale=float(scale), shift=float(shift))


# Composites expressed through the primitive set; their gradients follow
# from the chain rule over recorded primitives.


def neg(a) -> Tensor:
    return affine(a, scale=-1.0)


def sub(a, b) -> Tensor:
    return add(a, affine(_lift(b), scale=-1.0))


def square(a) -> Tensor:
    a = _lift(a)
    return mul(a, a)


def reciprocal(a) -> Tensor:
    """1/a for strictly positive a."""
    return exp(neg(log(a)))


def div(a, b) -> Tensor:
    """a/b for strictly positive b."""
    return mul(a, reciprocal(b))


def sqrt(a) -> Tensor:
    """sqrt of strictly positive a."""
    return exp(affine(log(a), scale=0.5))


def mean_(a, axis=None) -> Tensor:
    a = _lift(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return affine(sum_(a, axis=axis), scale=1.0 / n)


def broadcast_rows(row: Tensor, n: int) -> Tensor:
    """Repeat a (1, C) row into an (n, C) matrix, tracked on the tape."""
    return add(np.zeros((n, row.value.shape[1])), row)
