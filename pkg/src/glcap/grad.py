"""Dense float64 tensor arithmetic with tape-based reverse-mode gradients.

The primitive set is exactly what the fusion layer and the LSTM caption
decoder need: matmul, add (with row-bias broadcast), concat, elementwise
multiply, sigmoid, tanh, log-softmax, embedding lookup, and column slicing.
All tensors are 2-D and double precision; forward values are recorded on a
Tape whose backward pass replays the records in exact reverse order, so a
node receives the gradients of all its uses before propagating them. One
tape covers one training example; parameters persist across tapes and
accumulate gradients in place.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's contract."""


class TapeError(ValueError):
    """Backward invoked on a value the tape did not produce."""


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
    return a


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic, shared by the tape op and the plain decode path
    so both produce bit-identical values."""
    with np.errstate(over="ignore"):
        # both branches evaluate everywhere; the overflowing lane of each is
        # discarded by the select, so the result is exact on every input
        neg = np.exp(x)
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), neg / (1.0 + neg))


class Tensor:
    """A 2-D float64 value, optionally tracked on a tape (ref >= 0)."""

    __slots__ = ("data", "ref", "tape")

    def __init__(self, data: np.ndarray, ref: int = -1, tape: "Tape | None" = None):
        self.data = data
        self.ref = ref
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))


class Parameter:
    """A named trainable tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = _as_array(value).copy()
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications with their backward rules."""

    def __init__(self) -> None:
        self._records: list[tuple[int, tuple[int, ...], object]] = []
        self._param_refs: dict[int, int] = {}   # id(Parameter) -> leaf ref
        self._params: dict[int, Parameter] = {}  # leaf ref -> Parameter
        self._n = 0

    # -- bookkeeping ------------------------------------------------------

    def _new_ref(self) -> int:
        r = self._n
        self._n += 1
        return r

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.ref >= 0 and x.tape is not self:
                raise TapeError("tensor belongs to a different tape")
            return x
        if isinstance(x, Parameter):
            key = id(x)
            ref = self._param_refs.get(key)
            if ref is None:
                ref = self._new_ref()
                self._param_refs[key] = ref
                self._params[ref] = x
            return Tensor(x.value, ref, self)
        return Tensor(_as_array(x))

    def constant(self, x) -> Tensor:
        """An untracked value: no gradient flows into it."""
        return Tensor(_as_array(x))

    def _emit(self, data: np.ndarray, refs: tuple[int, ...], vjp) -> Tensor:
        out = self._new_ref()
        self._records.append((out, refs, vjp))
        return Tensor(data, out, self)

    # -- primitives -------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = self.lift(a), self.lift(b)
        A, B = a.data, b.data
        if A.shape[1] != B.shape[0]:
            raise ShapeError(f"matmul: {A.shape} @ {B.shape}")
        ar, br = a.ref, b.ref

        def vjp(g):
            return (
                g @ B.T if ar >= 0 else None,
                A.T @ g if br >= 0 else None,
            )

        return self._emit(A @ B, (ar, br), vjp)

    def add(self, a, b) -> Tensor:
        """Elementwise addition; the second operand may be a (1, m) bias row."""
        a, b = self.lift(a), self.lift(b)
        A, B = a.data, b.data
        bias_row = B.shape[0] == 1 and A.shape[0] != 1
        if A.shape != B.shape and not (bias_row and A.shape[1] == B.shape[1]):
            raise ShapeError(f"add: {A.shape} + {B.shape}")
        br = b.ref

        def vjp(g):
            gb = None
            if br >= 0:
                gb = g.sum(axis=0, keepdims=True) if bias_row else g
            return (g if a.ref >= 0 else None, gb)

        return self._emit(A + B, (a.ref, br), vjp)

    def concat(self, parts) -> Tensor:
        """Column-wise concatenation of tensors with equal row counts."""
        ts = [self.lift(p) for p in parts]
        rows = {t.data.shape[0] for t in ts}
        if len(ts) < 1 or len(rows) != 1:
            raise ShapeError(f"concat: row counts {[t.data.shape for t in ts]}")
        widths = [t.data.shape[1] for t in ts]
        refs = tuple(t.ref for t in ts)

        def vjp(g):
            grads = []
            start = 0
            for w, r in zip(widths, refs):
                grads.append(g[:, start : start + w] if r >= 0 else None)
                start += w
            return grads

        return self._emit(np.concatenate([t.data for t in ts], axis=1), refs, vjp)

    def mul(self, a, b) -> Tensor:
        a, b = self.lift(a), self.lift(b)
        A, B = a.data, b.data
        if A.shape != B.shape:
            raise ShapeError(f"mul: {A.shape} * {B.shape}")

        def vjp(g):
            return (g * B if a.ref >= 0 else None, g * A if b.ref >= 0 else None)

        return self._emit(A * B, (a.ref, b.ref), vjp)

    def sigmoid(self, x) -> Tensor:
        x = self.lift(x)
        out = stable_sigmoid(x.data)

        def vjp(g):
            return (g * out * (1.0 - out),)

        return self._emit(out, (x.ref,), vjp)

    def tanh(self, x) -> Tensor:
        x = self.lift(x)
        out = np.tanh(x.data)

        def vjp(g):
            return (g * (1.0 - out * out),)

        return self._emit(out, (x.ref,), vjp)

    def log_softmax(self, x) -> Tensor:
        """Row-wise log-softmax, stabilized by max subtraction."""
        x = self.lift(x)
        X = x.data
        shifted = X - X.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

        def vjp(g):
            return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

        return self._emit(out, (x.ref,), vjp)

    def embedding(self, table, ids) -> Tensor:
        """Row lookup: table (V, d) gathered at integer ids, shape (len(ids), d)."""
        table = self.lift(table)
        idx = np.asarray(ids, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError(f"embedding: ids must be 1-D, got shape {idx.shape}")
        T = table.data
        if idx.size and (idx.min() < 0 or idx.max() >= T.shape[0]):
            raise ShapeError(f"embedding: id out of range for table {T.shape}")

        def vjp(g):
            gt = np.zeros_like(T)
            np.add.at(gt, idx, g)
            return (gt,)

        return self._emit(T[idx], (table.ref,), vjp)

    def slice_cols(self, x, start: int, stop: int) -> Tensor:
        x = self.lift(x)
        X = x.data
        if not 0 <= start < stop <= X.shape[1]:
            raise ShapeError(f"slice: [{start}:{stop}] of {X.shape}")

        def vjp(g):
            gx = np.zeros_like(X)
            gx[:, start:stop] = g
            return (gx,)

        return self._emit(X[:, start:stop], (x.ref,), vjp)


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(param) into every parameter used on the tape.

    The output must be a single scalar produced by this tape. Intermediate
    gradients are discarded as soon as their producing record is processed.
    """
    if not isinstance(output, Tensor) or output.tape is not tape or output.ref < 0:
        raise TapeError("output was not produced on this tape")
    if output.data.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.ref: np.ones_like(output.data)}
    for out_ref, in_refs, vjp in reversed(tape._records):
        g = grads.pop(out_ref, None)
        if g is None:
            continue
        for ref, gi in zip(in_refs, vjp(g)):
            if ref < 0 or gi is None:
                continue
            acc = grads.get(ref)
            grads[ref] = gi if acc is None else acc + gi
    for ref, param in tape._params.items():
        g = grads.get(ref)
        if g is not None:
            param.grad += g


def grad_check(
    loss_fn,
    params: list[Parameter],
    epsilon: float = 1e-5,
    max_coords: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    loss_fn(tape) must build and return a scalar Tensor. For every parameter
    a random subset of at most max_coords coordinates is perturbed by
    +/- epsilon. The relative error normalizes by |g_ad| + |g_fd| floored at
    1e-8, so exact zeros on both sides compare clean.
    """
    if not 0.0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in (0, 1e-3], got {epsilon}")
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    tape = Tape()
    out = loss_fn(tape)
    if not np.isfinite(out.data).all():
        raise ValueError("loss is not finite")
    backward(tape, out)
    analytic = [p.grad.copy() for p in params]

    def evaluate() -> float:
        value = loss_fn(Tape()).item()
        if not np.isfinite(value):
            raise ValueError("loss is not finite")
        return value

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat_value = p.value.reshape(-1)
        flat_grad = ga.reshape(-1)
        n = flat_value.size
        if n <= max_coords:
            coords = range(n)
        else:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        for i in coords:
            orig = flat_value[i]
            flat_value[i] = orig + epsilon
            f_plus = evaluate()
            flat_value[i] = orig - epsilon
            f_minus = evaluate()
            flat_value[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(flat_grad[i] - fd) / max(1e-8, abs(flat_grad[i]) + abs(fd))
            worst = max(worst, err)
    return worst
