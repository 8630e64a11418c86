"""Reverse-mode automatic differentiation over dense float64 arrays.

The tape is dynamic (define-by-run): every op that touches a tracked tensor
records its parents and a vector-Jacobian closure on the output tensor, so
the graph is implicit in the tensors themselves. ``backward`` walks that
graph once in reverse topological order and accumulates gradients into the
tracked leaves.

Everything is float64. Desk-scale problem sizes make memory a non-issue and
the extra precision keeps finite-difference checks tight.

Concurrency contract: independent graphs may be built and evaluated
concurrently; a single graph is single-writer during construction and
backward. Parameter tensors follow a snapshot discipline — readers see an
immutable value, only the optimizer writes.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "add", "sub", "mul", "div", "matmul",
    "tsum", "tmean", "amax",
    "relu", "softplus", "sigmoid", "exp", "log", "sin", "cos", "absolute",
    "concat", "reshape", "transpose", "broadcast_to", "cumsum", "clamp",
    "backward", "free_graph", "grad_check", "make_op",
]


class ShapeError(ValueError):
    """Shape mismatch between operands, tagged with the op name."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, shapes))}")


class GraphError(RuntimeError):
    """Backward requested on an invalid or released graph."""


class _GradMode(threading.local):
    enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager disabling tape recording (pure forward evaluation)."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``tracked`` marks participation in the tape. ``grad`` is populated on
    tracked leaves by :func:`backward` and accumulates additively across
    calls; repeated backward over the same graph therefore doubles leaf
    gradients (documented policy, see tests).
    """

    __slots__ = ("data", "grad", "tracked", "_parents", "_vjp", "_released")

    def __init__(self, data, tracked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.tracked = bool(tracked)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: tuple[Callable[[np.ndarray], np.ndarray], ...] | None = None
        self._released = False

    # -- introspection -------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def is_leaf(self) -> bool:
        return self._vjp is None

    def detach(self) -> "Tensor":
        """Untracked leaf sharing this tensor's value."""
        return Tensor(self.data, tracked=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return _slice(self, key)

    # reductions as methods, matching numpy spellings used around the code
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjps) -> Tensor:
    """Record an op result; skips the tape when no parent is tracked.

    ``vjps`` holds one closure per parent (upstream grad -> parent grad);
    backward only invokes the closures of tracked parents, so ops never pay
    for gradients nobody needs.
    """
    tracked = _grad_mode.enabled and any(p.tracked for p in parents)
    out = Tensor(data, tracked=tracked)
    if tracked:
        out._parents = parents
        out._vjp = vjps
    return out


def make_op(data: np.ndarray, parents: tuple[Tensor, ...], vjps) -> Tensor:
    """Extension point for modules defining their own differentiable ops.

    ``data`` is the forward value; ``vjps`` maps each parent to a closure
    turning the upstream gradient into that parent's gradient contribution.
    """
    return _make(np.asarray(data, dtype=np.float64), parents, vjps)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_finite(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{op}: non-finite result (input outside the op's domain)")
    return arr


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _make(data, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                lambda g: _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return _make(data, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                lambda g: _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return _make(data, (a, b), (lambda g: _unbroadcast(g * b.data, a.shape),
                                lambda g: _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if np.any(b.data == 0.0):
        raise ValueError("div: zero denominator")
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None
    return _make(data, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = a.data @ b.data
    return _make(data, (a, b), (lambda g: g @ b.data.T,
                                lambda g: a.data.T @ g))


# -- elementwise nonlinearities ---------------------------------------------


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), (lambda g: g * (a.data > 0.0),))


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), evaluated stably for large |x|."""
    a = _lift(a)
    data = np.logaddexp(0.0, a.data)
    return _make(data, (a,), (lambda g: g * _sigmoid_np(a.data),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # overflow-free logistic: exp of a nonpositive argument only
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    a = _lift(a)
    s = _sigmoid_np(a.data)
    return _make(s, (a,), (lambda g: g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    data = _check_finite("exp", np.exp(a.data))
    return _make(data, (a,), (lambda g: g * data,))


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log: nonpositive argument")
    data = np.log(a.data)
    return _make(data, (a,), (lambda g: g / a.data,))


def sin(a: Tensor) -> Tensor:
    a = _lift(a)
    return _make(np.sin(a.data), (a,), (lambda g: g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    a = _lift(a)
    return _make(np.cos(a.data), (a,), (lambda g: -g * np.sin(a.data),))


def absolute(a: Tensor) -> Tensor:
    """|x| with the subgradient sign(x) (0 at the kink)."""
    a = _lift(a)
    return _make(np.abs(a.data), (a,), (lambda g: g * np.sign(a.data),))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through the closed interval."""
    a = _lift(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(data, (a,), (lambda g: g * inside,))


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * a.ndim)
        return np.broadcast_to(gg, a.shape)

    return _make(data, (a,), (vjp,))


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[ax] for ax in axes)
    s = tsum(a, axis=axis, keepdims=keepdims)
    return mul(s, Tensor(1.0 / n))


def amax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max-reduce; ties share the gradient equally."""
    a = _lift(a)
    data = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        full = data if keepdims or axis is None else np.expand_dims(data, axis)
        if axis is None and not keepdims:
            full = np.asarray(full).reshape((1,) * a.ndim)
        mask = (a.data == full).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        elif axis is None and not keepdims:
            gg = np.asarray(gg).reshape((1,) * a.ndim)
        return mask * gg

    return _make(data, (a,), (vjp,))


# -- shape manipulation ------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    offsets = np.concatenate([[0], np.cumsum([t.shape[axis] for t in ts])])

    def part(g, k):
        index = [slice(None)] * g.ndim
        index[axis] = slice(offsets[k], offsets[k + 1])
        return g[tuple(index)]

    vjps = tuple((lambda g, k=k: part(g, k)) for k in range(len(ts)))
    return _make(data, tuple(ts), vjps)


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), (lambda g: g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(data, (a,), (lambda g: np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, tuple(shape)) from None
    return _make(np.ascontiguousarray(data), (a,),
                 (lambda g: _unbroadcast(g, a.shape),))


def cumsum(a: Tensor, axis: int) -> Tensor:
    a = _lift(a)
    data = np.cumsum(a.data, axis=axis)

    def vjp(g):
        rev = np.flip(g, axis=axis)
        return np.flip(np.cumsum(rev, axis=axis), axis=axis)

    return _make(data, (a,), (vjp,))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)


def _slice(a: Tensor, key) -> Tensor:
    a = _lift(a)
    data = a.data[key]

    def vjp(g):
        buf = np.zeros_like(a.data)
        if _is_basic_index(key):
            buf[key] += g
        else:
            np.add.at(buf, key, g)
        return buf

    return _make(np.ascontiguousarray(data), (a,), (vjp,))


# -- backward pass ------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.tracked:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tracked leaf reachable from ``loss``.

    Gradients accumulate additively: multiple uses of a tensor within the
    graph sum their contributions, and a second backward over the same graph
    adds the same gradient again (doubling). Use ``zero_grad`` between steps.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        raise GraphError("backward on an untracked tensor")
    if loss._released:
        raise GraphError("backward on a released graph")

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._released:
            raise GraphError("backward on a released graph")
        if node._vjp is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, fn in zip(node._parents, node._vjp):
            if not parent.tracked:
                continue
            pg = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def free_graph(root: Tensor) -> None:
    """Drop the tape reachable from ``root``; backward afterwards errors."""
    for node in _toposort(root):
        if node._vjp is not None:
            node._vjp = None
            node._parents = ()
            node._released = True


# -- verification -------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error metric per coordinate: |analytic - fd| / max(1, |fd|). ``f`` must
    map a tensor to a scalar Tensor and be deterministic.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    probe = Tensor(x.data.copy(), tracked=True)
    y = f(probe)
    if not np.all(np.isfinite(y.data)):
        raise ValueError("grad_check: f(x) is not finite")
    backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1).copy()
    fd = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig - eps
            lo = float(f(Tensor(flat.reshape(x.shape))).data)
            flat[i] = orig
            fd[i] = (hi - lo) / (2.0 * eps)
    err = np.abs(analytic.reshape(-1) - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0
