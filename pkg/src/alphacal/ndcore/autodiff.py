"""Reverse-mode differentiation over array-valued primitives.

Values are float64 ndarrays. A :class:`Tape` records every primitive whose
inputs include a watched node; :func:`grad` replays the record backwards.
Outside an active tape the same operations just compute values, so model code
has a single forward path for training and inference.

    with Tape() as tape:
        w = tape.watch(w0)
        loss = (x @ w).square().sum()
    (g,) = grad(loss, [w])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import linalg

_state = threading.local()


class MissingNodeError(KeyError):
    """A requested parameter was never recorded on the output's tape."""


def _active() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    def __init__(self):
        self.nodes: list[tuple[int, tuple["Var", ...], Callable]] = []
        self._next_id = 0

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def watch(self, value) -> "Var":
        """Register a leaf (parameter) on this tape."""
        v = Var(value)
        v.tape = self
        v.id = self._new_id()
        return v

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    """Array value that may carry a tape reference."""

    __slots__ = ("value", "tape", "id")
    __array_ufunc__ = None  # let numpy defer to the reflected operators

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape: Tape | None = None
        self.id = 0

    def __repr__(self) -> str:
        tracked = "tracked" if self.tape is not None else "const"
        return f"Var({tracked}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    # operators
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return vsum(self, axis, keepdims) * (1.0 / float(n))

    def square(self):
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def mT(self):
        return swapaxes(self, -1, -2)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _record(value, parents: Sequence[Var], backward: Callable) -> Var:
    """Create an output node; record it if any parent is on the active tape."""
    out = Var(value)
    tape = _active()
    if tape is not None and any(p.tape is tape for p in parents):
        out.tape = tape
        out.id = tape._new_id()
        tape.nodes.append((out.id, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def grad(f: Var, params: Sequence[Var]) -> list[np.ndarray]:
    """Gradient of scalar ``f`` with respect to each watched ``params`` entry."""
    if f.value.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {f.shape}")
    tape = f.tape
    for p in params:
        if not isinstance(p, Var) or p.tape is None or (tape is not None and p.tape is not tape):
            raise MissingNodeError("parameter was not recorded on the output's tape")
    if tape is None:  # constant output
        return [np.zeros_like(p.value) for p in params]
    grads: dict[int, np.ndarray] = {f.id: np.ones_like(f.value)}
    for out_id, parents, backward in reversed(tape.nodes):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for p, gp in zip(parents, backward(g)):
            if p.tape is tape and gp is not None:
                if p.id in grads:
                    grads[p.id] = grads[p.id] + gp
                else:
                    grads[p.id] = gp
    return [grads.get(p.id, np.zeros_like(p.value)) for p in params]


# elementwise and broadcasting primitives

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _record(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Var:
    a = as_var(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return _record(av * av, (a,), lambda g: (2.0 * av * g,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.value)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def softplus(a) -> Var:
    a = as_var(a)
    av = a.value
    return _record(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def leaky_relu(a, negative_slope: float) -> Var:
    a = as_var(a)
    slope = np.where(a.value > 0, 1.0, negative_slope)
    return _record(a.value * slope, (a,), lambda g: (g * slope,))


def minimum(a, cap: float) -> Var:
    """Elementwise ``min(a, cap)`` with zero gradient above the cap."""
    a = as_var(a)
    mask = a.value < cap
    return _record(np.where(mask, a.value, cap), (a,), lambda g: (g * mask,))


# shape primitives

def vsum(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i: int, j: int) -> Var:
    a = as_var(a)
    return _record(np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def take(a, idx) -> Var:
    a = as_var(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.value[idx], (a,), back)


def scatter(a, idx, shape: tuple[int, ...]) -> Var:
    """Place ``a`` into a zero array of ``shape`` at ``idx`` (inverse of take)."""
    a = as_var(a)
    out = np.zeros(shape)
    out[idx] = a.value
    return _record(out, (a,), lambda g: (g[idx],))


def concat(xs: Sequence, axis: int = -1) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([x.value for x in xs], axis=axis), tuple(xs),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(xs: Sequence, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    n = len(xs)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record(np.stack([x.value for x in xs], axis=axis), tuple(xs), back)


def diagonal(a) -> Var:
    """Diagonal of the trailing two axes."""
    a = as_var(a)
    shape = a.shape
    n = shape[-1]

    def back(g):
        out = np.zeros(shape)
        out[..., np.arange(n), np.arange(n)] = g
        return (out,)

    return _record(np.diagonal(a.value, axis1=-2, axis2=-1).copy(), (a,), back)


def logsumexp(a, axis: int) -> Var:
    a = as_var(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(av - m), axis=axis, keepdims=True)
    out = np.log(s) + m
    soft = np.exp(av - out)

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return _record(np.squeeze(out, axis=axis), (a,), back)


# linear algebra primitives

def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul needs operands with at least two axes")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(av @ bv, (a, b), back)


def solve_lower(L, b) -> Var:
    """Batched ``L^{-1} b`` for lower-triangular ``L`` and vector ``b``."""
    L, b = as_var(L), as_var(b)
    Lv = L.value
    x = linalg.solve_lower(Lv, b.value)

    def back(g):
        gb = linalg.solve_upper(np.swapaxes(Lv, -1, -2), g)
        gL = -np.tril(gb[..., :, None] * x[..., None, :])
        return _unbroadcast(gL, Lv.shape), _unbroadcast(gb, b.shape)

    return _record(x, (L, b), back)


def solve_upper(U, b) -> Var:
    """Batched ``U^{-1} b`` for upper-triangular ``U`` and vector ``b``."""
    U, b = as_var(U), as_var(b)
    Uv = U.value
    x = linalg.solve_upper(Uv, b.value)

    def back(g):
        gb = linalg.solve_lower(np.swapaxes(Uv, -1, -2), g)
        gU = -np.triu(gb[..., :, None] * x[..., None, :])
        return _unbroadcast(gU, Uv.shape), _unbroadcast(gb, b.shape)

    return _record(x, (U, b), back)


def cholesky(a) -> Var:
    """Cholesky factor with the symmetric adjoint ``L^{-T} Phi(L^T Lbar) L^{-1}``."""
    a = as_var(a)
    L = linalg.cholesky(a.value)
    n = L.shape[-1]
    eye = np.eye(n)

    def back(g):
        P = np.swapaxes(L, -1, -2) @ np.tril(g)
        P = np.tril(P) - 0.5 * P * eye
        Linv = _batched_lower_inverse(L)
        S = np.swapaxes(Linv, -1, -2) @ P @ Linv
        return (0.5 * (S + np.swapaxes(S, -1, -2)),)

    return _record(L, (a,), back)


def _batched_lower_inverse(L: np.ndarray) -> np.ndarray:
    n = L.shape[-1]
    cols = [linalg.solve_lower(L, np.broadcast_to(e, L.shape[:-1])) for e in np.eye(n)]
    return np.stack(cols, axis=-1)


def logdet_chol(L) -> Var:
    """``log det(L L^T)`` from a Cholesky factor: twice the sum of log-diagonal."""
    return 2.0 * vsum(log(diagonal(L)), axis=-1)
