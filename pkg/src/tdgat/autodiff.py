"""A small reverse-mode differentiation engine over dense float64 matrices.

Operations executed inside an active :class:`Tape` are recorded in order;
:func:`backward` replays their adjoints in reverse. Outside a tape the same
functions just compute values, which is what finite-difference checks use.

    with Tape() as tape:
        loss = sum_all(sigmoid(matmul(x, w)))
    backward(tape, loss)
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        v = np.array(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got {v.ndim} dimensions")
        if v.size == 0:
            raise ShapeError("tensor must have positive rows and cols")
        self.values = v
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(v) if requires_grad else None
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self):
        if self.requires_grad:
            self.grad[...] = 0.0

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


_local = threading.local()


def _active() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations. Owned by one thread at a time."""

    def __init__(self):
        self.records: list = []
        self._outputs: set = set()

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.records.append(_Record(out, tuple(inputs), backward))
        self._outputs.add(id(out))

    def __contains__(self, tensor: Tensor):
        return id(tensor) in self._outputs


def record_op(values: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``values`` as a new tensor and record it on the active tape, if any.

    ``backward`` maps the output adjoint to a tuple with one adjoint (or
    None) per input.
    """
    out = Tensor._wrap(values)
    tape = _active()
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate dloss/dx into ``x.grad`` for every requires_grad leaf on the tape.

    Gradients accumulate across calls; zero them between steps.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.shape}")
    if loss not in tape:
        raise ValueError("loss was not produced on this tape")
    adjoints = {id(loss): np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = adjoints.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None:
                continue
            if t.requires_grad:
                t.grad += gi
            elif t in tape:
                prev = adjoints.get(id(t))
                adjoints[id(t)] = gi if prev is None else prev + gi


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return record_op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor) -> Tensor:
    return record_op(a.values.T.copy(), (a,), lambda g: (g.T,))


# -- elementwise ---------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return record_op(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return record_op(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    av, bv = a.values, b.values
    return record_op(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(a.values * c, (a,), lambda g: (g * c,))


def add_row_bias(a: Tensor, bias: Tensor) -> Tensor:
    """a + bias broadcast over rows; bias is 1 x cols."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise ShapeError(f"add_row_bias: bias {bias.shape} does not fit {a.shape}")
    return record_op(a.values + bias.values, (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def outer_add(u: Tensor, v: Tensor) -> Tensor:
    """out[i, j] = u[i] + v[j] for column vectors u (m x 1) and v (n x 1)."""
    if u.cols != 1 or v.cols != 1:
        raise ShapeError("outer_add takes two column vectors")
    out = u.values + v.values.T
    return record_op(out, (u, v), lambda g: (g.sum(axis=1, keepdims=True), g.sum(axis=0)[:, None]))


def sigmoid(a: Tensor) -> Tensor:
    x = a.values
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)
    return record_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.values
    pos = x >= 0
    return record_op(np.where(pos, x, slope * x), (a,), lambda g: (np.where(pos, g, slope * g),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.values)
    return record_op(e, (a,), lambda g: (g * e,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_cols: empty list")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def bwd(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return record_op(np.concatenate([p.values for p in parts], axis=1), parts, bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.rows:
        raise ShapeError(f"slice_rows: [{start}, {stop}) out of range for {a.rows} rows")

    def bwd(g):
        full = np.zeros_like(a.values)
        full[start:stop] = g
        return (full,)

    return record_op(a.values[start:stop].copy(), (a,), bwd)


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0 or idx.min() < 0 or idx.max() >= a.rows:
        raise ShapeError("take_rows: index out of range")

    def bwd(g):
        full = np.zeros_like(a.values)
        np.add.at(full, idx, g)
        return (full,)

    return record_op(a.values[idx], (a,), bwd)


# -- normalization and reductions ----------------------------------------

def softmax_rows(logits: Tensor, mask=None) -> Tensor:
    """Row-wise softmax over the entries where ``mask`` is true; masked entries are 0."""
    x = logits.values
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax_rows: mask {mask.shape} vs logits {x.shape}")
        if not mask.any(axis=1).all():
            raise ValueError("softmax_rows: a row is fully masked")
    shifted = np.where(mask, x, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record_op(p, (logits,), bwd)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record_op(np.array([[a.values.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_rows(a: Tensor) -> Tensor:
    n = a.rows
    return record_op(a.values.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def weighted_row_sum(weights: Tensor, x: Tensor) -> Tensor:
    """out[i] = sum_j weights[i, j] * x[j]."""
    if weights.cols != x.rows:
        raise ShapeError(f"weighted_row_sum: weights {weights.shape} vs rows {x.shape}")
    w, xv = weights.values, x.values
    return record_op(w @ xv, (weights, x), lambda g: (g @ xv.T, w.T @ g))


def cross_entropy(probs: Tensor, labels: Sequence[int], clamp: float = 1e-12) -> Tensor:
    """Mean of -log(max(p[r, labels[r]], clamp)) over rows."""
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (probs.rows,):
        raise ShapeError("cross_entropy: one label per row required")
    if labels.min() < 0 or labels.max() >= probs.cols:
        raise ValueError("cross_entropy: label out of range")
    rows = np.arange(probs.rows)
    picked = probs.values[rows, labels]
    clipped = np.maximum(picked, clamp)
    n = probs.rows

    def bwd(g):
        full = np.zeros_like(probs.values)
        full[rows, labels] = np.where(picked > clamp, -1.0 / clipped, 0.0) * g[0, 0] / n
        return (full,)

    return record_op(np.array([[-np.log(clipped).mean()]]), (probs,), bwd)


def sum_squares(tensors: Sequence[Tensor]) -> Tensor:
    total = None
    for t in tensors:
        term = sum_all(mul(t, t))
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor._wrap(np.zeros((1, 1)))
    return total


# -- verification --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: Optional[tuple]  # (tensor position, row, col)
    checked: int
    tol: float
    errors: list = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {self.max_rel_error:.3e} over {self.checked} "
                f"components (tol {self.tol:g}), worst at {self.worst}")


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be deterministic and build its computation from ``params``.
    Parameter gradients are zeroed first and hold the analytic result
    afterwards.
    """
    for p in params:
        if not p.requires_grad:
            raise ValueError(f"{p!r} does not require grad")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)

    worst, worst_at, checked = 0.0, None, 0
    errors = []
    for pos, p in enumerate(params):
        analytic = p.grad.copy()
        numeric = np.empty_like(analytic)
        it = np.nditer(p.values, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.values[idx]
            p.values[idx] = orig + h
            fp = f().item()
            p.values[idx] = orig - h
            fm = f().item()
            p.values[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * h)
        rel = relative_error(analytic, numeric)
        errors.append(rel)
        checked += rel.size
        k = np.unravel_index(np.argmax(rel), rel.shape)
        if rel[k] > worst or worst_at is None:
            worst, worst_at = float(rel[k]), (pos,) + tuple(int(i) for i in k)
    return GradCheckReport(worst, worst_at, checked, tol, errors)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh,
    "leaky_relu": leaky_relu, "exp": exp, "scale": scale,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("leaky_relu", x, slope=0.2)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


def reduce(op: str, x: Tensor, weights: Optional[Tensor] = None) -> Tensor:
    if op == "sum_all":
        return sum_all(x)
    if op == "mean_rows":
        return mean_rows(x)
    if op == "weighted_row_sum":
        if weights is None:
            raise ValueError("weighted_row_sum needs weights")
        return weighted_row_sum(weights, x)
    raise ValueError(f"unknown reduction {op!r}")
