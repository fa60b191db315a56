"""Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy float64 array. Operations executed while a `Tape`
is active append (output, inputs, backward_fn) records in execution order;
`backward` on a scalar loss replays the tape in reverse and accumulates
gradients additively into every `requires_grad` tensor reachable from the
loss. Without an active tape, operations run forward-only.

Broadcasting for elementwise ops follows the trailing-axis rule: shapes are
aligned on their last axes and each pair of extents must be equal or 1
(missing leading axes count as 1). Anything else raises `ShapeError`.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .rng import Rng


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradientError(RuntimeError):
    """Backward called on something that cannot seed a backward pass."""


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


class Tape:
    """Ordered record of executed operations for one backward pass.

    Confined to a single thread; nest tapes with `with` if needed. Records
    appear in execution order, so every operation follows the operations
    that produced its inputs.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense n-d float64 array, optionally participating in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _wrap(data: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._tape = None
    return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append((out, inputs, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _check_broadcast(sa: tuple[int, ...], sb: tuple[int, ...]):
    for ea, eb in zip(reversed(sa), reversed(sb)):
        if ea != eb and ea != 1 and eb != 1:
            raise ShapeError(f"shapes {sa} and {sb} do not broadcast on trailing axes")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# creation


def make(shape, fill_mode: str = "zeros", seed: int | None = None,
         requires_grad: bool = False) -> Tensor:
    """Create a tensor filled per `fill_mode` (zeros|ones|uniform|gaussian)."""
    shape = tuple(int(e) for e in np.atleast_1d(shape))
    if any(e < 0 for e in shape):
        raise ShapeError(f"negative extent in shape {shape}")
    if fill_mode == "zeros":
        data = np.zeros(shape)
    elif fill_mode == "ones":
        data = np.ones(shape)
    elif fill_mode in ("uniform", "gaussian"):
        if seed is None:
            raise ValueError(f"fill_mode {fill_mode!r} requires a seed")
        rng = Rng(seed)
        data = rng.uniform(shape) if fill_mode == "uniform" else rng.gaussian(shape)
        data = np.asarray(data).reshape(shape)
    else:
        raise ValueError(f"unknown fill_mode {fill_mode!r}")
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return make(shape, "zeros", requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return make(shape, "ones", requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    out = _wrap(a.data + b.data)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    out = _wrap(a.data - b.data)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    out = _wrap(a.data * b.data)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    out = _wrap(a.data / b.data)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), backward_fn)


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar."""
    return mul(a, float(s))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def relu(a) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    a = _coerce(a)
    out = _wrap(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def backward_fn(g):
        _accumulate(a, g * mask)

    return _record(out, (a,), backward_fn)


def absolute(a) -> Tensor:
    """|x|; subgradient at 0 is 0."""
    a = _coerce(a)
    out = _wrap(np.abs(a.data))
    sign = np.sign(a.data)

    def backward_fn(g):
        _accumulate(a, g * sign)

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """Matrix product; stacked (batched) operands multiply per leading index."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or stacked operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    _check_broadcast(a.shape[:-2], b.shape[:-2])
    out = _wrap(a.data @ b.data)

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _record(out, (a, b), backward_fn)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out = _wrap(a.data.reshape(shape))

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _record(out, (a,), backward_fn)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _coerce(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = _wrap(a.data.transpose(axes))

    def backward_fn(g):
        _accumulate(a, g.transpose(inverse))

    return _record(out, (a,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    out = _wrap(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _record(out, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    return tuple(sorted(a % ndim for a in axes))


def reduce_sum(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    out = _wrap(a.data.sum(axis=axes, keepdims=keepdims))

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), backward_fn)


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(reduce_sum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinear maps


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along `axis`; outputs are positive and sum to 1."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _wrap(y)

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _record(out, (a,), backward_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _wrap(y)
    sm = np.exp(y)

    def backward_fn(g):
        _accumulate(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), backward_fn)


def standardize_op(a, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over `axes` (shared by the
    batch-norm and layer-norm cores, so both reuse one audited backward)."""
    a = _coerce(a)
    axes = _norm_axes(axes, a.ndim)
    mu = a.data.mean(axis=axes, keepdims=True)
    var = a.data.var(axis=axes, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * istd
    out = _wrap(xhat)

    def backward_fn(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        _accumulate(a, istd * (g - gm - xhat * gx))

    return _record(out, (a,), backward_fn)


# ---------------------------------------------------------------------------
# backward and checking


def backward(loss: Tensor):
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    loss.grad = np.ones_like(loss.data)
    if tape is None:
        # a leaf loss has no recorded operations; its own gradient is 1
        return
    for out, _inputs, backward_fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        backward_fn(out.grad)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a tensor to a scalar tensor and be deterministic. Error per
    coordinate is |analytic - fd| / max(1, |fd|).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape():
        y = f(probe)
        if y.size != 1:
            raise GradientError("finite_diff_check needs a scalar-valued f")
        backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += eps
        fp = float(f(_wrap(bumped.reshape(x.shape))).data)
        bumped[i] -= 2 * eps
        fm = float(f(_wrap(bumped.reshape(x.shape))).data)
        fd = (fp - fm) / (2 * eps)
        err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst
