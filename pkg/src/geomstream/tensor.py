"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy float64 array.  Operations record
vector-Jacobian callbacks on the currently active :class:`Tape`; calling
:func:`backward` on a scalar loss fills the tape's gradient map for every
watched tensor.  A tape is single-use: one forward pass, one backward pass.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf


class DimensionError(ValueError):
    """Shapes of the operands do not satisfy the operation's contract."""


class NumericError(ArithmeticError):
    """A numerically invalid value (e.g. division by exact zero)."""


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_SQRT_2 = math.sqrt(2.0)

_uid_counter = itertools.count()

# Single active tape; forward/backward is confined to one thread.
_active_tape: "Tape | None" = None


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "uid")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.uid = next(_uid_counter)

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

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, uid={self.uid})"

    # arithmetic sugar; scalars are wrapped as constants
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


class Tape:
    """Append-only record of operations for one forward/backward pair.

    Usable as a context manager; only tensors reachable from watched
    leaves are tracked.  ``gradients`` maps tensor uid to its gradient
    array after :func:`backward`.
    """

    def __init__(self):
        self._nodes: list[tuple[int, list[tuple[int, Callable]]]] = []
        self._tracked: set[int] = set()
        self._watched: dict[int, Tensor] = {}
        self.gradients: dict[int, np.ndarray] = {}
        self._used = False

    def watch(self, t: Tensor) -> None:
        self._tracked.add(t.uid)
        self._watched[t.uid] = t

    def is_tracked(self, t: Tensor) -> bool:
        return t.uid in self._tracked

    def grad(self, t: Tensor) -> np.ndarray:
        return self.gradients[t.uid]

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        if self._used:
            raise RuntimeError("tape already used; create a fresh one")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None
        self._used = True


def active_tape() -> Tape | None:
    return _active_tape


def _record(out: Tensor, vjps: Sequence[tuple[Tensor, Callable]]) -> None:
    tape = _active_tape
    if tape is None:
        return
    pairs = [(t.uid, fn) for t, fn in vjps if t.uid in tape._tracked]
    if pairs:
        tape._tracked.add(out.uid)
        tape._nodes.append((out.uid, pairs))


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Populate gradients for every watched tensor reachable from ``loss``."""
    tape = _active_tape
    if tape is None:
        raise RuntimeError("backward requires an active tape")
    if loss.shape != ():
        raise DimensionError(f"loss must be a scalar tensor, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones(())}
    for out_uid, pairs in reversed(tape._nodes):
        g = grads.pop(out_uid, None)
        if g is None:
            continue
        for in_uid, vjp in pairs:
            contrib = vjp(g)
            if in_uid in grads:
                grads[in_uid] = grads[in_uid] + contrib
            else:
                grads[in_uid] = contrib
    for uid, leaf in tape._watched.items():
        tape.gradients[uid] = grads.get(uid, np.zeros_like(leaf.data))
    return tape.gradients


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise {add, sub, mul, div}; b may broadcast against a."""
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"incompatible shapes for {kind}: {a.shape} vs {b.shape}"
        ) from None
    if kind == "add":
        out = Tensor(a.data + b.data)
        _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                      (b, lambda g: _unbroadcast(g, b.shape))])
    elif kind == "sub":
        out = Tensor(a.data - b.data)
        _record(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                      (b, lambda g: _unbroadcast(-g, b.shape))])
    elif kind == "mul":
        out = Tensor(a.data * b.data)
        _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                      (b, lambda g: _unbroadcast(g * a.data, b.shape))])
    elif kind == "div":
        if np.any(b.data == 0.0):
            raise NumericError("division by exact zero")
        out = Tensor(a.data / b.data)
        _record(out, [(a, lambda g: _unbroadcast(g / b.data, a.shape)),
                      (b, lambda g: _unbroadcast(-g * a.data / (b.data ** 2), b.shape))])
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    del out_shape
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("div", a, b)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record(out, [(a, lambda g: -g)])
    return out


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with stacked (batched) operands.

    Either operand may carry extra leading axes; a 2-D operand broadcasts
    against the other's batch.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    _record(out, [
        (a, lambda g: _unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape)),
        (b, lambda g: _unbroadcast(np.matmul(_swap_last(a.data), g), b.shape)),
    ])
    return out


def reduce(kind: str, a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Collapse one axis (or all, axis=None) by sum or mean."""
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise IndexError(f"axis {axis} out of range for rank {a.ndim}")
        axis = axis % a.ndim
    fn = np.sum if kind == "sum" else np.mean
    out = Tensor(fn(a.data, axis=axis, keepdims=keepdims))
    count = a.size if axis is None else a.shape[axis]
    scale = 1.0 if kind == "sum" else 1.0 / count

    def vjp(g, axis=axis, shape=a.shape, keepdims=keepdims, scale=scale):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape) * scale

    _record(out, [(a, vjp)])
    return out


def _ordered_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` with summands sorted first, so the result is bitwise
    independent of their original order along that axis."""
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


def stable_sum(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Order-independent sum along one axis (summands sorted before adding);
    the gradient is identical to a plain sum."""
    if not -a.ndim <= axis < a.ndim:
        raise IndexError(f"axis {axis} out of range for rank {a.ndim}")
    axis = axis % a.ndim
    out = Tensor(_ordered_sum(a.data, axis, keepdims))

    def vjp(g, axis=axis, shape=a.shape, keepdims=keepdims):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    _record(out, [(a, vjp)])
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction).

    The normalizing sum is order-independent so that permuting entries along
    ``axis`` permutes the output bitwise.
    """
    if not -a.ndim <= axis < a.ndim:
        raise IndexError(f"axis {axis} out of range for rank {a.ndim}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / _ordered_sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g, y=y, axis=axis):
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))

    _record(out, [(a, vjp)])
    return out


def _phi(x: np.ndarray) -> np.ndarray:
    """Standard normal CDF via erf (exact, no tanh approximation)."""
    return 0.5 * (1.0 + _erf(x / _SQRT_2))


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GELU, x * Phi(x), applied pointwise."""
    x = a.data
    cdf = _phi(x)
    out = Tensor(x * cdf)

    def vjp(g, x=x, cdf=cdf):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return g * (cdf + x * pdf)

    _record(out, [(a, vjp)])
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)
    _record(out, [(a, lambda g, y=y: g * y)])
    return out


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    _record(out, [(a, lambda g: g * np.sign(a.data))])
    return out


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise a**p for a fixed real exponent."""
    y = a.data ** p
    out = Tensor(y)
    _record(out, [(a, lambda g: g * p * a.data ** (p - 1.0))])
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record(out, [(a, lambda g: g.reshape(a.shape))])
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes))
    _record(out, [(a, lambda g: np.transpose(g, inv))])
    return out


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    ax = axis % out.ndim
    offsets = np.cumsum([0] + [p.shape[ax] for p in parts])
    vjps = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi, ax=ax):
            index = [slice(None)] * g.ndim
            index[ax] = slice(lo, hi)
            return g[tuple(index)]

        vjps.append((p, vjp))
    _record(out, vjps)
    return out


def inv_sqrt_sym3(c: Tensor, eps: float = 1e-6) -> Tensor:
    """(C + eps*I)^(-1/2) for stacked symmetric 3x3 matrices.

    Backward uses the Daleckii-Krein formula on the eigendecomposition.
    """
    if c.shape[-2:] != (3, 3):
        raise DimensionError(f"expected trailing 3x3 matrices, got {c.shape}")
    shifted = c.data + eps * np.eye(3)
    w, q = np.linalg.eigh(shifted)
    if np.any(w <= 0):
        raise NumericError("covariance not positive definite after regularization")
    f = w ** -0.5
    u = np.matmul(q * f[..., None, :], _swap_last(q))
    out = Tensor(u)

    def vjp(g, w=w, q=q, f=f):
        # K[i,j] = (f(wi)-f(wj))/(wi-wj), diagonal -> f'(w)
        dw = w[..., :, None] - w[..., None, :]
        df = f[..., :, None] - f[..., None, :]
        near = np.abs(dw) < 1e-12
        wm = 0.5 * (w[..., :, None] + w[..., None, :])
        k = np.where(near, -0.5 * wm ** -1.5, df / np.where(near, 1.0, dw))
        gs = 0.5 * (g + _swap_last(g))
        inner = np.matmul(np.matmul(_swap_last(q), gs), q)
        return np.matmul(np.matmul(q, k * inner), _swap_last(q))

    _record(out, [(c, vjp)])
    return out


def finite_diff_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")

    def evaluate(arr: np.ndarray) -> float:
        res = f(Tensor(arr))
        return res.item() if isinstance(res, Tensor) else float(res)

    grad = np.zeros_like(x.data)
    flat = grad.reshape(-1)
    base = x.data.copy()
    base_flat = base.reshape(-1)
    for i in range(base_flat.size):
        orig = base_flat[i]
        base_flat[i] = orig + h
        fp = evaluate(base)
        base_flat[i] = orig - h
        fm = evaluate(base)
        base_flat[i] = orig
        flat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)
