"""Tape-based reverse-mode differentiation over dense float64 matrices.

Values are plain ``numpy.ndarray`` objects. A :class:`Var` wraps one value and
remembers the :class:`Tape` it was recorded on; every primitive below appends a
record ``(output, parents, vjp)`` to the tape when at least one parent needs a
gradient. Because records are appended in execution order, walking them in
reverse is a valid reverse topological order, so :func:`backward` touches each
node exactly once.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

Array = np.ndarray
VJP = Callable[[Array], Sequence["Array | None"]]


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self) -> None:
        self.records: list[tuple[Var, tuple[Var, ...], VJP]] = []

    def __len__(self) -> int:
        return len(self.records)

    def param(self, value, name: str | None = None) -> "Var":
        return Var(value, self, requires_grad=True, name=name)

    def const(self, value) -> "Var":
        return Var(value, self, requires_grad=False)


class Var:
    __slots__ = ("value", "tape", "requires_grad", "name")

    def __init__(self, value, tape: Tape | None = None, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def as_var(x, tape: Tape | None = None) -> Var:
    if isinstance(x, Var):
        return x
    return Var(x, tape, requires_grad=False)


def _record(value: Array, parents: tuple[Var, ...], vjp: VJP) -> Var:
    tape = _tape_of(*parents)
    needs = any(p.requires_grad for p in parents)
    out = Var(value, tape, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.records.append((out, parents, vjp))
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Var, wrt: Iterable[Var]) -> list[Array]:
    """Gradients of scalar ``loss`` with respect to each variable in ``wrt``.

    Variables that do not influence the loss get a zero array of their shape.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for out, parents, vjp in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, gp in zip(parents, vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    return [np.array(grads.get(id(v), np.zeros_like(v.value)), dtype=np.float64) for v in wrt]


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.value.shape, b.value.shape
    return _record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def scale(a: Var, c: float) -> Var:
    return _record(a.value * c, (a,), lambda g: (g * c,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    av = a.value
    return _record(np.log(av), (a,), lambda g: (g / av,))


def square(a: Var) -> Var:
    av = a.value
    return _record(av * av, (a,), lambda g: (2.0 * g * av,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Var) -> Var:
    x = a.value
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


# -- reductions and reshaping -------------------------------------------------


def sum(a: Var, axis: int | None = None, keepdims: bool = False) -> Var:  # noqa: A001
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return _record(a.value.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(parts: Sequence[Var]) -> Var:
    parts = tuple(as_var(p) for p in parts)
    widths = [p.value.shape[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.value for p in parts], axis=1), parts, vjp)


def slice_cols(a: Var, start: int, stop: int) -> Var:
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _record(a.value[:, start:stop].copy(), (a,), vjp)


def take_rows(table: Var, index: Array) -> Var:
    """Row gather, as used for embedding lookups."""
    index = np.asarray(index, dtype=np.int64)
    shape = table.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record(table.value[index], (table,), vjp)


def stop_gradient(a: Var) -> Var:
    return Var(a.value, a.tape, requires_grad=False)


# -- fused primitives ---------------------------------------------------------


def affine(x: Var, w: Var, b: Var) -> Var:
    xv, wv = x.value, w.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"affine: input {xv.shape} does not fit weight {wv.shape}")
    return _record(xv @ wv + b.value, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)))


def softmax_array(x: Array) -> Array:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_array(x: Array) -> Array:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(a: Var) -> Var:
    out = softmax_array(a.value)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (a,), vjp)


def log_softmax(a: Var) -> Var:
    out = log_softmax_array(a.value)
    p = np.exp(out)
    return _record(out, (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def cross_entropy(logits: Var, labels: Array) -> Var:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.value.shape[0]
    lsm = log_softmax_array(logits.value)
    rows = np.arange(n)
    loss = -lsm[rows, labels].mean()

    def vjp(g):
        grad = np.exp(lsm)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return _record(np.asarray(loss), (logits,), vjp)


def mse(pred: Var, target) -> Var:
    """Squared error summed over columns, averaged over rows."""
    target = as_var(target)
    diff = pred.value - target.value
    n = diff.shape[0]
    return _record(np.asarray((diff * diff).sum() / n), (pred, target), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def kl_diag_gaussian(mu: Var, logvar: Var, prior_mu=None, prior_logvar=None) -> Var:
    """Batch-mean KL from N(mu, e^logvar) to a diagonal Gaussian prior.

    With no prior arguments the prior is N(0, I) and each row contributes
    ``sum 0.5 * (mu^2 + e^logvar - logvar - 1)``.
    """
    if mu.value.shape != logvar.value.shape:
        raise ShapeError(f"kl: mu {mu.value.shape} vs logvar {logvar.value.shape}")
    n = mu.value.shape[0]
    m, lv = mu.value, logvar.value
    if prior_mu is None and prior_logvar is None:
        # expm1 avoids the cancellation in e^lv - 1 - lv, which goes negative for tiny lv
        em1 = np.expm1(lv)
        val = 0.5 * (m * m + (em1 - lv)).sum() / n
        return _record(np.asarray(val), (mu, logvar), lambda g: (g * m / n, g * 0.5 * em1 / n))

    pm = as_var(prior_mu if prior_mu is not None else np.zeros_like(m))
    plv = as_var(prior_logvar if prior_logvar is not None else np.zeros_like(lv))
    pmv, plvv = np.broadcast_to(pm.value, m.shape), np.broadcast_to(plv.value, m.shape)
    inv_pvar = np.exp(-plvv)
    d = m - pmv
    r = lv - plvv
    ratio_m1 = np.expm1(r)  # e^lv / e^plv - 1
    val = 0.5 * ((ratio_m1 - r) + d * d * inv_pvar).sum() / n

    def vjp(g):
        c = g / n
        g_mu = c * d * inv_pvar
        g_lv = c * 0.5 * ratio_m1
        g_pm = _unbroadcast(-g_mu, pm.value.shape)
        g_plv = _unbroadcast(c * 0.5 * (-ratio_m1 - d * d * inv_pvar), plv.value.shape)
        return (g_mu, g_lv, g_pm, g_plv)

    return _record(np.asarray(val), (mu, logvar, pm, plv), vjp)


def row_norms(a: Var) -> Var:
    """Euclidean norm of each row, shape (n, 1); zero rows get zero gradient."""
    av = a.value
    norms = np.sqrt((av * av).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    return _record(norms, (a,), lambda g: (g * np.where(norms > 0, av / safe, 0.0),))


def gaussian_nll(pred: Var, target, logvar: Var) -> Var:
    """Row-mean of ``0.5 * sum((x - pred)^2 * e^-logvar + logvar)``; ``logvar`` broadcasts over rows."""
    target = as_var(target)
    diff = target.value - pred.value
    n = diff.shape[0]
    inv = np.exp(-logvar.value)
    sq = diff * diff * inv
    val = 0.5 * (sq + logvar.value).sum() / n

    def vjp(g):
        c = g / n
        return (-c * diff * inv, c * diff * inv, _unbroadcast(0.5 * c * (1.0 - sq), logvar.value.shape))

    return _record(np.asarray(val), (pred, target, logvar), vjp)
