"""Dense tensors with tape-based reverse-mode autodiff, plus Adam.

Every differentiable op takes and returns :class:`Tensor`. When at least one
input requires a gradient and a :class:`Tape` is active, the op appends a
record holding its inputs, its output and a closure that maps the output
gradient to input gradients. :func:`backward` replays those records in
reverse.

    >>> x = Tensor([[2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(x * x)
    >>> backward(loss, tape)
    >>> x.grad
    array([[4.]], dtype=float32)
"""

from __future__ import annotations

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

log = logging.getLogger(__name__)

PRECISIONS = {"float32": np.float32, "float64": np.float64}

_default_dtype = np.float32
_node_ids = itertools.count()
_local = threading.local()


def get_dtype():
    return _default_dtype


def _set_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = dtype


def set_precision(name: str) -> None:
    if name not in PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")
    _set_dtype(PRECISIONS[name])


@contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _default_dtype
    set_precision(name)
    try:
        yield PRECISIONS[name]
    finally:
        _set_dtype(previous)


class Tensor:
    """Dense row-major array with an optional gradient slot."""

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        self.values = np.array(values, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = next(_node_ids)
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Record(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations for one forward pass.

    Use as a context manager; ops executed inside the block are recorded on
    this tape. Tapes are thread-local: a tape activated in one thread is
    invisible to others.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def record(self, inputs, output, backward_fn) -> None:
        self.records.append(_Record(tuple(inputs), output, backward_fn))
        output._tape = self

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _result(values: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers, so leaves shared by
    several graphs (model parameters) sum their contributions.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None or loss._tape is not tape:
        raise ContractError("loss was not produced on the given tape")
    loss.grad = np.ones_like(loss.values)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.dtype, copy=True).reshape(inp.shape)
            else:
                inp.grad += gi


def _require_2d(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.values.ndim != 2:
            raise DimensionError(f"{name} expects 2-D tensors, got shape {t.shape}")


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def constant(values, dtype=None) -> Tensor:
    return Tensor(values, requires_grad=False, dtype=dtype)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), dtype=dtype)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def grad(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), grad)


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)
    return _result(x.values.T.copy(), (x,), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; ``b`` may also be a Python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.values * a.values.dtype.type(c), (a,), lambda g: (g * c,))
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[i, :] + bias`` for every row; the only broadcasting op."""
    _require_2d("add_bias", x)
    if bias.values.ndim != 1 or bias.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")
    return _result(x.values + bias.values, (x, bias), lambda g: (g, g.sum(axis=0)))


def prelu(x: Tensor, alpha: Tensor) -> Tensor:
    """``max(x, 0) + alpha * min(x, 0)`` with a single learnable slope."""
    if alpha.size != 1:
        raise DimensionError(f"prelu: alpha must hold one value, got {alpha.shape}")
    xv = x.values
    a = alpha.values.reshape(-1)[0]
    neg = xv < 0
    out = np.where(neg, a * xv, xv)

    def grad(g):
        return np.where(neg, a * g, g), np.array([(g * xv)[neg].sum()], dtype=xv.dtype).reshape(alpha.shape)

    return _result(out, (x, alpha), grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    _require_2d("layer_norm", x)
    n = x.shape[1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs width {n}")
    xv = x.values
    mu = xv.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(xv.var(axis=1, keepdims=True) + eps)
    xhat = (xv - mu) * inv
    gv = gamma.values

    def grad(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _result(xhat * gv + beta.values, (x, gamma, beta), grad)


def gather_rows(x: Tensor, index) -> Tensor:
    """Rows ``x[index]``; repeated indices are allowed."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather_rows: index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"gather_rows: index out of range for {x.shape[0]} rows")

    def grad(g):
        out = np.zeros_like(x.values)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.values[idx], (x,), grad)


def scatter_add_rows(base: Tensor, index, src: Tensor) -> Tensor:
    """Copy of ``base`` with ``src[k]`` added to row ``index[k]``."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1 or src.shape[0] != idx.size or src.shape[1:] != base.shape[1:]:
        raise DimensionError(f"scatter_add_rows: src {src.shape} / index {idx.shape} vs base {base.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= base.shape[0]):
        raise DimensionError(f"scatter_add_rows: index out of range for {base.shape[0]} rows")
    out = base.values.copy()
    np.add.at(out, idx, src.values)
    return _result(out, (base, src), lambda g: (g, g[idx]))


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    """Sum of all entries (scalar) or along one axis, keeping it as size 1."""
    if axis is None:
        out = np.array(x.values.sum(), dtype=x.dtype).reshape(())
        return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape),))
    out = x.values.sum(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        count = x.size
        out = np.array(x.values.mean(), dtype=x.dtype).reshape(())
    else:
        count = x.shape[axis]
        out = x.values.mean(axis=axis, keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / count, x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty list")
    vals = [t.values for t in tensors]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _result(out, tuple(tensors), lambda g: np.split(g, splits, axis=axis))


def softmax_rows(x: Tensor) -> Tensor:
    _require_2d("softmax_rows", x)
    xv = x.values
    if not np.all(np.isfinite(xv)):
        raise NumericError("softmax_rows received non-finite input")
    e = np.exp(xv - xv.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


_NORM_FLOOR = 1e-8


def _cosine_parts(a: np.ndarray, b: np.ndarray):
    na_raw = np.linalg.norm(a, axis=1)
    nb_raw = np.linalg.norm(b, axis=1)
    na = np.maximum(na_raw, _NORM_FLOOR)
    nb = np.maximum(nb_raw, _NORM_FLOOR)
    cos = (a * b).sum(axis=1) / (na * nb)

    def dcos(g):
        # g has one entry per row
        ga = b / (na * nb)[:, None] - np.where(na_raw > _NORM_FLOOR, cos / na**2, 0.0)[:, None] * a
        gb = a / (na * nb)[:, None] - np.where(nb_raw > _NORM_FLOOR, cos / nb**2, 0.0)[:, None] * b
        return g[:, None] * ga, g[:, None] * gb

    return cos, nb_raw, dcos


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity, shape ``(k,)``."""
    _require_2d("cosine_similarity", a, b)
    _same_shape("cosine_similarity", a, b)
    cos, _, dcos = _cosine_parts(a.values, b.values)
    return _result(cos, (a, b), dcos)


def sce_loss(x_hat: Tensor, x: Tensor, gamma: float = 2.0) -> Tensor:
    """Scaled cosine error ``mean_i (1 - cos(x_hat_i, x_i)) ** gamma``."""
    _require_2d("sce_loss", x_hat, x)
    _same_shape("sce_loss", x_hat, x)
    k = x.shape[0]
    if k < 1:
        raise ContractError("sce_loss needs at least one row")
    cos, nb_raw, dcos = _cosine_parts(x_hat.values, x.values)
    if np.any(nb_raw <= _NORM_FLOOR):
        log.warning("sce_loss: %d all-zero target row(s); norm floored at %g",
                    int((nb_raw <= _NORM_FLOOR).sum()), _NORM_FLOOR)
    base = np.clip(1.0 - cos, 0.0, None)
    out = np.array((base**gamma).mean(), dtype=x_hat.dtype).reshape(())

    def grad(g):
        safe = np.where(base > 0, base, 1.0)
        dl_dcos = np.where(base > 0, -gamma * safe ** (gamma - 1.0), 0.0) / k
        return dcos(g * dl_dcos)

    return _result(out, (x_hat, x), grad)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``weight_decay`` is added to the gradient as an L2 term. A ``None``
    gradient counts as zero.
    """
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    if len(state.m) != len(params):
        raise DimensionError(f"Adam state holds {len(state.m)} buffers for {len(params)} params")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise DimensionError(f"Adam moment {m.shape} vs parameter {p.shape}")
        g = np.zeros_like(p.values) if g is None else np.asarray(g, dtype=p.dtype)
        if g.shape != p.shape:
            raise DimensionError(f"gradient {g.shape} vs parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p.values
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.values -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
