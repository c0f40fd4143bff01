"""Dense float64 tensors with an explicit reverse-mode gradient tape.

The tape records every primitive applied to ``Tensor`` operands, in
execution order. ``Tape.backward`` replays the records once, in reverse,
accumulating adjoints additively into each operand's ``grad`` buffer.
Gradients persist across backward calls until the caller zeroes them,
which is exactly what minibatch accumulation in the trainer relies on.

All math is in 8-byte floats; the stable scalar kernels (``logsumexp``,
``log_sigmoid``) are shared by every module that touches log-domain
quantities.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "NondeterministicFunctionError",
    "sigmoid",
    "log_sigmoid",
    "logsumexp",
    "row_logsumexp",
    "grad_check",
]


class TapeError(RuntimeError):
    """Raised when backward is invoked on something the tape never produced."""


class NondeterministicFunctionError(RuntimeError):
    """Raised by grad_check when two forward passes of f disagree."""


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def log_sigmoid(x):
    """log(sigmoid(x)) computed as -softplus(-x); never overflows.

    For large negative x this returns x itself (the asymptote), for large
    positive x it returns a tiny negative number, with full float64
    accuracy in between.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("log_sigmoid requires finite input")
    out = -np.logaddexp(0.0, -x)
    return float(out) if out.ndim == 0 else out


def logsumexp(values) -> float:
    """log(sum(exp(values))) over a non-empty vector, via the max shift.

    Exact up to rounding for entries anywhere in the float64 range: the
    shifted exponentials are all <= 1, so no overflow is possible.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("logsumexp requires finite entries")
    m = float(v.max())
    return m + float(np.log(np.exp(v - m).sum()))


def row_logsumexp(a: np.ndarray) -> np.ndarray:
    """Stable logsumexp over the last axis of a 2-D array."""
    m = np.max(a, axis=-1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True))).ravel()


class Tensor:
    """A dense float64 array with a lazily allocated gradient companion.

    ``values`` is always C-contiguous so that flat views used by the
    finite-difference checker alias the real storage. ``grad`` is None
    until some backward pass touches the tensor; it then accumulates
    additively until the owner zeroes or drops it.
    """

    __slots__ = ("values", "grad", "tape")

    def __init__(self, values, tape: "Tape | None" = None):
        v = np.asarray(values, dtype=np.float64)
        if not v.flags["C_CONTIGUOUS"]:  # 0-d arrays are contiguous already
            v = np.ascontiguousarray(v)
        self.values = v
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def add_grad(self, g) -> None:
        if self.grad is None:
            # First contribution: copy instead of memset-then-add.
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape})"


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _value(x) -> np.ndarray:
    return x.values if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pull_into(x, g: np.ndarray) -> None:
    """Accumulate gradient into x when x participates in differentiation.

    Plain arrays and scalars are treated as constants, so mixing numpy
    operands into tape expressions costs nothing on the backward pass.
    """
    if isinstance(x, Tensor):
        x.add_grad(_unbroadcast(g, x.values.shape))


def _scatter_add_rows(grad: np.ndarray, ids: np.ndarray, g: np.ndarray) -> None:
    """grad[ids[i]] += g[i] with duplicate ids accumulated."""
    flat_ids = ids.ravel()
    if grad.ndim == 1:
        # bincount beats np.add.at by a wide margin for scalar scatters
        grad += np.bincount(flat_ids, weights=g.ravel(), minlength=grad.shape[0])
        return
    np.add.at(grad, flat_ids, g.reshape(-1, grad.shape[1]))


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Construct with ``grad=False`` for evaluation: the same operation
    methods run, nothing is recorded, and backward is forbidden. Reverse
    replay visits each record exactly once; records whose output never
    received a gradient are skipped (dead branches).
    """

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._replayed = False

    def __len__(self) -> int:
        return len(self._records)

    def emit(self, values: np.ndarray, pull: Callable[[np.ndarray], None]) -> Tensor:
        """Register an output with its adjoint function.

        The hook for composite primitives defined outside this module
        (the fused LSTM cell, say): `pull` receives d(loss)/d(output) and
        must accumulate into the inputs' grads itself.
        """
        out = Tensor(values, tape=self if self.grad_enabled else None)
        if self.grad_enabled:
            self._records.append((out, pull))
        return out

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(input) into every reachable input's grad.

        The records are released afterwards (a tape replays once); this
        also breaks the tape/tensor reference cycle so a training loop
        never waits on the cycle collector.
        """
        if not self.grad_enabled:
            raise TapeError("backward on a no-grad tape")
        if self._replayed:
            raise TapeError("tape already replayed")
        if output.tape is not self:
            raise TapeError("output was not produced on this tape")
        if output.values.size != 1:
            raise TapeError("backward expects a scalar output")
        output.add_grad(np.ones_like(output.values))
        for out, pull in reversed(self._records):
            if out.grad is not None:
                pull(out.grad)
        self._records.clear()
        self._replayed = True

    # ---- primitives -------------------------------------------------

    def add(self, a, b) -> Tensor:
        av, bv = _value(a), _value(b)

        def pull(g):
            _pull_into(a, g)
            _pull_into(b, g)

        return self.emit(av + bv, pull)

    def sub(self, a, b) -> Tensor:
        av, bv = _value(a), _value(b)

        def pull(g):
            _pull_into(a, g)
            _pull_into(b, -g)

        return self.emit(av - bv, pull)

    def mul(self, a, b) -> Tensor:
        av, bv = _value(a), _value(b)

        def pull(g):
            _pull_into(a, g * bv)
            _pull_into(b, g * av)

        return self.emit(av * bv, pull)

    def scale(self, a, c: float) -> Tensor:
        av = _value(a)

        def pull(g):
            _pull_into(a, g * c)

        return self.emit(av * c, pull)

    def square(self, a) -> Tensor:
        av = _value(a)

        def pull(g):
            _pull_into(a, 2.0 * av * g)

        return self.emit(av * av, pull)

    def sigmoid(self, a) -> Tensor:
        out_v = sigmoid(_value(a))

        def pull(g):
            _pull_into(a, g * out_v * (1.0 - out_v))

        return self.emit(out_v, pull)

    def tanh(self, a) -> Tensor:
        out_v = np.tanh(_value(a))

        def pull(g):
            _pull_into(a, g * (1.0 - out_v * out_v))

        return self.emit(out_v, pull)

    def log_sigmoid(self, a) -> Tensor:
        av = _value(a)
        out_v = -np.logaddexp(0.0, -av)

        def pull(g):
            # d/dx log sigmoid(x) = sigmoid(-x)
            _pull_into(a, g * sigmoid(-av))

        return self.emit(out_v, pull)

    def matmul(self, a, b, transpose_b: bool = False) -> Tensor:
        av, bv = _value(a), _value(b)
        out_v = av @ bv.T if transpose_b else av @ bv

        def pull(g):
            if transpose_b:
                _pull_into(a, g @ bv)
                _pull_into(b, g.T @ av)
            else:
                _pull_into(a, g @ bv.T)
                _pull_into(b, av.T @ g)

        return self.emit(out_v, pull)

    def affine(self, x, w, b, transpose_w: bool = False) -> Tensor:
        """x @ w + b (optionally x @ w.T + b) as one record."""
        xv, wv, bv = _value(x), _value(w), _value(b)
        out_v = (xv @ wv.T if transpose_w else xv @ wv) + bv

        def pull(g):
            if transpose_w:
                _pull_into(x, g @ wv)
                _pull_into(w, g.T @ xv)
            else:
                _pull_into(x, g @ wv.T)
                _pull_into(w, xv.T @ g)
            _pull_into(b, g)

        return self.emit(out_v, pull)

    def bdot(self, c, e) -> Tensor:
        """Batched dot: (N, d) against (N, K, d) -> (N, K)."""
        cv, ev = _value(c), _value(e)
        out_v = np.matmul(ev, cv[:, :, None])[:, :, 0]

        def pull(g):
            _pull_into(c, np.matmul(g[:, None, :], ev)[:, 0, :])
            _pull_into(e, g[:, :, None] * cv[:, None, :])

        return self.emit(out_v, pull)

    def lookup(self, table: Tensor, ids) -> Tensor:
        """Gather rows of a 1-D or 2-D table; backward scatter-adds."""
        ids = np.asarray(ids)
        out_v = table.values[ids]

        def pull(g):
            _scatter_add_rows(table.ensure_grad(), ids, g)

        return self.emit(out_v, pull)

    def take_cols(self, x, idx) -> Tensor:
        """out[n] = x[n, idx[n]] for a 2-D x."""
        xv = _value(x)
        rows = np.arange(xv.shape[0])
        idx = np.asarray(idx)
        out_v = xv[rows, idx]

        def pull(g):
            if isinstance(x, Tensor):
                np.add.at(x.ensure_grad(), (rows, idx), g)

        return self.emit(out_v, pull)

    def slice_cols(self, x, lo: int, hi: int) -> Tensor:
        xv = _value(x)

        def pull(g):
            if isinstance(x, Tensor):
                x.ensure_grad()[:, lo:hi] += g

        return self.emit(xv[:, lo:hi], pull)

    def hstack(self, a, b) -> Tensor:
        av, bv = _value(a), _value(b)
        na = av.shape[1]

        def pull(g):
            _pull_into(a, g[:, :na])
            _pull_into(b, g[:, na:])

        return self.emit(np.concatenate((av, bv), axis=1), pull)

    def concat_rows(self, parts: Sequence) -> Tensor:
        vals = [_value(p) for p in parts]
        offsets = np.cumsum([0] + [v.shape[0] for v in vals])

        def pull(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                _pull_into(p, g[lo:hi])

        return self.emit(np.concatenate(vals, axis=0), pull)

    def logsumexp_rows(self, x) -> Tensor:
        xv = _value(x)
        m = np.max(xv, axis=-1, keepdims=True)
        shifted = np.exp(xv - m)
        sums = shifted.sum(axis=-1, keepdims=True)
        out_v = (m + np.log(sums)).ravel()
        if self.grad_enabled:
            soft = shifted / sums  # d logsumexp / d x, reused on replay

        def pull(g):
            _pull_into(x, g[:, None] * soft)

        return self.emit(out_v, pull)

    def sum(self, x) -> Tensor:
        xv = _value(x)

        def pull(g):
            _pull_into(x, np.broadcast_to(g, xv.shape))

        return self.emit(np.sum(xv), pull)

    def dropout(self, x, rate: float, rng: np.random.Generator) -> Tensor:
        """Inverted dropout; a no-op (consuming no randomness) at rate 0."""
        if rate <= 0.0:
            return x if isinstance(x, Tensor) else self.emit(_value(x), lambda g: None)
        mask = (rng.random(_value(x).shape) >= rate) / (1.0 - rate)
        return self.mul(x, mask)


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Compare tape gradients of f() against central finite differences.

    f must rebuild its tape from scratch on every call and be bitwise
    deterministic (freeze any sampling); two initial forward passes are
    compared to catch violations. Returns
    max over coordinates of |analytic - numeric| / max(1, |analytic|).

    Parameter grads are cleared before and after the check.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    first = float(f().values)
    out = f()
    if float(out.values) != first:
        raise NondeterministicFunctionError(
            "two forward passes disagree; freeze sampling before grad_check"
        )
    if out.tape is None:
        raise TapeError("f() must return a tensor produced on a grad-enabled tape")
    for p in params:
        p.grad = None
    out.tape.backward(out)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.values.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = float(f().values)
            flat[i] = keep - h
            f_minus = float(f().values)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    for p in params:
        p.grad = None
    return worst
