"""Small reverse-mode autodiff engine on top of numpy.

Every differentiable primitive records itself on the active :class:`Tape`
together with a closure that maps the output gradient to input gradients.
Outside a tape, ops evaluate eagerly and record nothing, which is how
inference and finite-difference probes run.

Broadcasting is deliberately narrow: the only mixed-shape case accepted by
``add``/``sub`` is a 1-D bias whose length equals the last axis of the other
operand. Everything runs in float64.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or inf in its forward or backward pass."""

    def __init__(self, op: str, phase: str):
        super().__init__(f"non-finite values produced by '{op}' during {phase}")
        self.op = op
        self.phase = phase


class OracleError(RuntimeError):
    """The function handed to a gradient check is not deterministic."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def parameter(cls, values, name: str | None = None) -> "Tensor":
        return cls(np.array(values, dtype=DTYPE), requires_grad=True, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered log of differentiable ops.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded here. Tapes are confined to the thread that entered them.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, out: Tensor, parents: Sequence[Tensor], backward: Callable) -> None:
        out.node_id = len(self.records)
        out.requires_grad = True
        self.records.append(_Record(op, out, tuple(parents), backward))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def _emit(op: str, values: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.isfinite(values).all():
        raise NonFiniteError(op, "forward")
    out = Tensor(values)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(op, out, parents, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor reachable on ``tape``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nid = loss.node_id
    if nid is None or nid >= len(tape.records) or tape.records[nid].out is not loss:
        raise ContractError("loss was not recorded on this tape")
    for rec in tape.records:
        for p in rec.parents:
            if p.requires_grad and p.node_id is None and p.grad is None:
                p.grad = np.zeros_like(p.values)
    loss.grad = np.ones_like(loss.values)
    for rec in reversed(tape.records[: nid + 1]):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for p, pg in zip(rec.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError(rec.op, "backward")
            if p.grad is None:
                p.grad = np.array(pg, dtype=DTYPE)
            else:
                p.grad = p.grad + pg


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry one leading batch axis; ``b`` may too
    (same batch), or be a plain matrix shared across the batch."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or (a.ndim == 2 and b.ndim == 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    av, bv = a.values, b.values

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim == 3:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- elementwise


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]


def _reduce_bias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _emit("add", a.values + b.values, (a, b), lambda g: (g, g))
    if _bias_compatible(a, b):
        n = b.shape[0]
        return _emit("add", a.values + b.values, (a, b), lambda g: (g, _reduce_bias(g, n)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -g))
    if _bias_compatible(a, b):
        n = b.shape[0]
        return _emit("sub", a.values - b.values, (a, b), lambda g: (g, -_reduce_bias(g, n)))
    raise DimensionError(f"sub: shapes {a.shape} and {b.shape} are incompatible")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    av, bv = a.values, b.values
    return _emit("hadamard", av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.values)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    on = a.values > 0
    return _emit("relu", np.where(on, a.values, 0.0), (a,), lambda g: (g * on,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "hadamard": mul}


def ewise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} takes a single operand")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def mask_rows(a: Tensor, keep: np.ndarray) -> Tensor:
    """Multiply every last-axis vector of ``a`` by a constant 0/1 (or real) weight."""
    keep = np.asarray(keep, dtype=DTYPE)
    if keep.shape != a.shape[:-1]:
        raise DimensionError(f"mask_rows: mask {keep.shape} does not match {a.shape}")
    k = keep[..., None]
    return _emit("mask_rows", a.values * k, (a,), lambda g: (g * k,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept activations are divided by the keep probability."""
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", a.values * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / normalisers


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis with per-row max subtraction.

    ``mask`` (broadcastable to ``a``) marks admissible entries; the rest get
    exactly zero probability, as if their score were -inf. A row with no
    admissible entry yields all zeros.
    """
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows: need a non-empty last axis, got {a.shape}")
    x = a.values
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        shift = np.where(m, x, -np.inf).max(axis=-1, keepdims=True)
        shift = np.where(np.isfinite(shift), shift, 0.0)
        e = np.where(m, np.exp(np.where(m, x - shift, 0.0)), 0.0)
        s = e.sum(axis=-1, keepdims=True)
        y = e / np.where(s > 0, s, 1.0)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax_rows", y, (a,), back)


def log_softmax(a: Tensor) -> Tensor:
    x = a.values
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit("log_softmax", y, (a,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = a.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs width {n}")
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv
    gv = gain.values

    def back(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _reduce_bias(g * xhat, n), _reduce_bias(g, n)

    return _emit("layer_norm", xhat * gv + bias.values, (a, gain, bias), back)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", np.array(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(a.size, 1))


def max_reduce(a: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient flows to the first maximal entry."""
    axis = axis % a.ndim
    x = a.values
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    y = np.take_along_axis(x, idx, axis=axis)

    def back(g):
        out = np.zeros_like(x)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _emit("max_reduce", np.squeeze(y, axis=axis), (a,), back)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[i, index[i]]`` for a 2-D ``a``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick: {a.shape} with index {index.shape}")
    rows = np.arange(a.shape[0])

    def back(g):
        out = np.zeros_like(a.values)
        out[rows, index] = g
        return (out,)

    return _emit("pick", a.values[rows, index], (a,), back)


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat: nothing to concatenate")
    nd = tensors[0].ndim
    axis = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != axis):
            raise DimensionError(
                f"concat: shapes {ref} and {t.shape} differ outside axis {axis}"
            )
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", np.concatenate([t.values for t in tensors], axis=axis), tensors, back)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    return concat((a, b), axis=-1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mixed shapes {sorted(shapes)}")
    axis = axis % (tensors[0].ndim + 1)
    n = len(tensors)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit("stack", np.stack([t.values for t in tensors], axis=axis), tensors, back)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic(index)

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit("getitem", np.array(a.values[index]), (a,), back)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with shape ``ids.shape + (width,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id outside [0, {table.shape[0]})")

    def back(g):
        out = np.zeros_like(table.values)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _emit("gather_rows", table.values[ids], (table,), back)


def pad_seq(a: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the second-to-last (sequence) axis."""
    widths = [(0, 0)] * a.ndim
    widths[-2] = (before, after)
    n = a.shape[-2]
    return _emit(
        "pad_seq",
        np.pad(a.values, widths),
        (a,),
        lambda g: (g[..., before : before + n, :],),
    )


def max_pool_halving(a: Tensor) -> Tensor:
    """Max-pool window 3 / stride 2 over the sequence axis (-2).

    The input is right-padded with -inf so that the output has exactly
    ceil(L/2) positions; window j covers positions 2j, 2j+1, 2j+2.
    """
    if a.ndim < 2 or a.shape[-2] < 1:
        raise DimensionError(f"max_pool_halving: need (..., L>=1, C), got {a.shape}")
    L = a.shape[-2]
    n = (L + 1) // 2
    widths = [(0, 0)] * a.ndim
    widths[-2] = (0, 2 * n + 1 - L)
    p = np.pad(a.values, widths, constant_values=-np.inf)
    windows = np.stack([p[..., k : k + 2 * n : 2, :] for k in range(3)])
    arg = windows.argmax(axis=0)
    y = np.take_along_axis(windows, arg[None], axis=0)[0]

    def back(g):
        gp = np.zeros(p.shape, dtype=DTYPE)
        for k in range(3):
            gp[..., k : k + 2 * n : 2, :] += np.where(arg == k, g, 0.0)
        return (gp[..., :L, :],)

    return _emit("max_pool_halving", y, (a,), back)


# ---------------------------------------------------------------- gradient checking


def _require_eps(eps: float) -> None:
    if not 0.0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")


def _scalar(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = f()
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    return float(out.values.reshape(-1)[0])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_errors(
    f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5
) -> list[float]:
    """Per-tensor max relative error between backprop and central differences."""
    _require_eps(eps)
    params = list(params)
    base = _scalar(f)
    if _scalar(f) != base:
        raise OracleError("function under gradient check is not deterministic")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    errors = []
    for p in params:
        analytic = np.zeros_like(p.values) if p.grad is None else p.grad.copy()
        numeric = np.empty_like(p.values)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalar(f)
            flat[i] = orig - eps
            down = _scalar(f)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * eps)
        err = relative_error(analytic, numeric)
        errors.append(float(err.max()) if err.size else 0.0)
    return errors


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-5) -> float:
    """Max relative error over every entry of every tensor in ``params``."""
    errors = grad_errors(f, params, eps)
    return max(errors, default=0.0)
