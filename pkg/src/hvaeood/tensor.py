"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy float64 array.  Operations execute eagerly;
when a :class:`Trace` is active (see :func:`tracing`) each op additionally
appends a node recording its inputs and a backward closure.  Calling
:func:`backward` on a scalar produced under the trace accumulates gradients
for every parameter registered with :meth:`Trace.watch`.

A trace is single-owner: it must not be shared across concurrent training
steps.  Tensors themselves are immutable values and safe to share.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's numeric domain."""


_ACTIVE_TRACE: contextvars.ContextVar["Trace | None"] = contextvars.ContextVar(
    "hvaeood_active_trace", default=None
)


class Tensor:
    """Immutable dense float64 array, optionally recorded on a trace."""

    __slots__ = ("data", "_trace", "_idx")

    def __init__(self, data, _trace=None, _idx=None):
        self.data = np.asarray(data, dtype=np.float64)
        self._trace = _trace
        self._idx = _idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    # operator sugar; non-Tensor operands are treated as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "parents", "backward_fn", "shape")

    def __init__(self, op: str, parents: tuple[int, ...], backward_fn, shape):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.shape = shape


class Trace:
    """Append-only record of operations plus a registry of watched parameters.

    Node references only point backward, so reverse iteration over the node
    list is already a topological order for backpropagation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: list[Tensor] = []

    def watch(self, *tensors: Tensor) -> None:
        """Register leaf tensors whose gradients :func:`backward` should return."""
        for t in tensors:
            if t._trace is self:
                continue
            self._add_leaf(t, "param")
            self.params.append(t)

    def _add_leaf(self, t: Tensor, op: str) -> int:
        idx = len(self.nodes)
        self.nodes.append(_Node(op, (), None, t.data.shape))
        t._trace = self
        t._idx = idx
        return idx

    def _record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
        parents = tuple(t._idx if t._trace is self else -1 for t in inputs)
        idx = len(self.nodes)
        self.nodes.append(_Node(op, parents, backward_fn, out.shape))
        return Tensor(out, _trace=self, _idx=idx)


@contextlib.contextmanager
def tracing(trace: Trace):
    """Make ``trace`` the active trace for ops executed inside the block."""
    token = _ACTIVE_TRACE.set(trace)
    try:
        yield trace
    finally:
        _ACTIVE_TRACE.reset(token)


def active_trace() -> Trace | None:
    return _ACTIVE_TRACE.get()


def backward(trace: Trace, root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``root`` with respect to every watched parameter.

    Parameters the root does not depend on get zero gradients.
    """
    if root._trace is not trace or root._idx is None:
        raise ValueError("backward root was not produced under this trace")
    if root.data.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")

    grads: list[np.ndarray | None] = [None] * len(trace.nodes)
    grads[root._idx] = np.ones(())
    for idx in range(root._idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = trace.nodes[idx]
        if node.backward_fn is None:
            continue
        for parent_idx, pg in zip(node.parents, node.backward_fn(g)):
            if parent_idx < 0 or pg is None:
                continue
            if grads[parent_idx] is None:
                grads[parent_idx] = pg
            else:
                grads[parent_idx] = grads[parent_idx] + pg

    out: dict[Tensor, np.ndarray] = {}
    for p in trace.params:
        g = grads[p._idx]
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# op helpers


def _apply(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    trace = _ACTIVE_TRACE.get()
    if trace is None:
        return Tensor(out)
    for t in inputs:
        if t._trace is None:
            # constants become anonymous leaves so parent indices stay valid
            trace._add_leaf(t, "const")
        elif t._trace is not trace:
            # value from another trace: treat as a constant of this one
            t._trace = None
            trace._add_leaf(t, "const")
    return trace._record(op, inputs, out, backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# forward op catalog


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return _apply("add", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return _apply("sub", (a, b), out,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    return _apply("mul", (a, b), out,
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not (m,k)@(k,n)")
    out = a.data @ b.data
    return _apply("matmul", (a, b), out,
                  lambda g: (g @ b.data.T, a.data.T @ g))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _apply("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: input has non-positive entries")
    out = np.log(a.data)
    return _apply("log", (a,), out, lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _apply("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_array(a.data)
    return _apply("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = _softplus_array(a.data)
    sig = _sigmoid_array(a.data)
    return _apply("softplus", (a,), out, lambda g: (g * sig,))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _apply("sum", (a,), out, bwd)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.mean(axis=axis)
    n = a.data.size if axis is None else a.shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _apply("mean", (a,), out, bwd)


def slice_along(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[axis]):
        raise ShapeError(f"slice_along: [{start}:{stop}] out of bounds for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def bwd(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return (full,)

    return _apply("slice", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _apply("concat", tensors, out, bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return _apply("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; subgradient 1 where a >= floor."""
    out = np.maximum(a.data, floor)
    mask = (a.data >= floor).astype(np.float64)
    return _apply("maximum", (a,), out, lambda g: (g * mask,))


def detach(a: Tensor) -> Tensor:
    """Value copy that blocks gradient flow."""
    return Tensor(a.data)


def logsumexp(a: Tensor, axis: int) -> Tensor:
    """log(sum(exp(a))) along an axis, shifted by a detached max for stability."""
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = sub(a, Tensor(m))
    s = tsum(exp(shifted), axis=axis)
    return add(log(s), Tensor(np.squeeze(m, axis=axis)))


# ---------------------------------------------------------------------------
# stable scalar kernels (shared with untraced numpy paths)


def _softplus_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(fn: Callable[[list[Tensor]], Tensor],
               point: Iterable[np.ndarray],
               step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    ``fn`` maps a list of tensors to a scalar tensor and must be deterministic
    (fix any sampling noise before calling).  Error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    arrays = [np.asarray(p, dtype=np.float64).copy() for p in point]
    trace = Trace()
    params = [Tensor(a.copy()) for a in arrays]
    with tracing(trace):
        trace.watch(*params)
        root = fn(params)
    grads = backward(trace, root)

    worst = 0.0
    for k, base in enumerate(arrays):
        analytic = grads[params[k]]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn([Tensor(a) for a in arrays]).item()
            flat[i] = orig - step
            lo = fn([Tensor(a) for a in arrays]).item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a_val = analytic.reshape(-1)[i]
            err = abs(a_val - numeric) / max(1.0, abs(a_val))
            worst = max(worst, err)
    return worst
