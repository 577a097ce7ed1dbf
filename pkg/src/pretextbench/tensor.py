"""Dense float32 tensors with reverse-mode automatic differentiation.

Every operation records a closure that maps the output gradient to input
gradients. ``Tensor.backward`` walks the graph in reverse topological order
and accumulates into ``.grad``. Gradients are never reset implicitly; call
:func:`zero_grad` between steps.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BatchSizeError, DimensionError, DomainError, NonFiniteError

DTYPE = np.float32

_ids = itertools.count()
_state = threading.local()


def _dt():
    return getattr(_state, "dtype", DTYPE)


@contextmanager
def precision(dtype):
    """Run tensor arithmetic in ``dtype`` (e.g. ``np.float64`` for gradient checks)."""
    prev = _dt()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=_dt())
    return arr


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"backward of {node._op}")
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=_dt())
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self, eps: float | None = None) -> "Tensor":
        return log(self, eps)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self, eps: float | None = None) -> "Tensor":
        return sqrt(self, eps)


def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    data = np.asarray(data, dtype=_dt())
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "div")


def exp(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps: float | None = None) -> Tensor:
    """Natural log; with ``eps`` computes ``log(a + eps)``."""
    a = _wrap(a)
    x = a.data if eps is None else a.data + _dt()(eps)
    if np.any(x <= 0):
        raise DomainError("log: non-positive argument")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a, eps: float | None = None) -> Tensor:
    """Square root; with ``eps`` computes ``sqrt(a + eps)``."""
    a = _wrap(a)
    x = a.data if eps is None else a.data + _dt()(eps)
    if np.any(x < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(x)

    def back(g):
        if np.any(out == 0):
            raise DomainError("sqrt: gradient undefined at zero; use the eps-guarded variant")
        return (g * 0.5 / out,)

    return _make(out, (a,), back, "sqrt")


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * mask,), "relu")


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    p = float(exponent)
    if not p.is_integer() and np.any(a.data < 0):
        raise DomainError("power: fractional exponent of a negative base")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("power: negative exponent of zero")
    out = a.data * a.data if p == 2.0 else np.power(a.data, _dt()(p))

    def back(g):
        if p == 2.0:
            return (g * (a.data + a.data),)
        if p == 1.0:
            return (g,)
        return (g * _dt()(p) * np.power(a.data, _dt()(p - 1)),)

    return _make(out, (a,), back, "power")


_UNARY = {"exp": exp, "log": log, "relu": relu, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "power": power}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name; unary kinds ignore ``b``."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs a second operand")
        return _BINARY[op_kind](a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- linear algebra / shape -----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    # overflow surfaces as a NonFiniteError from _make, so numpy's warning is redundant
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _make(out, (a, b), back, "matmul")


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def index(a, key) -> Tensor:
    """Numpy-style indexing; repeated integer indices accumulate gradient."""
    a = _wrap(a)
    out = a.data[key]
    basic = isinstance(key, (slice, int)) or (
        isinstance(key, tuple) and all(isinstance(k, (slice, int)) for k in key)
    )

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(ts), back, "concat")


# -- reductions -----------------------------------------------------------------


def _norm_axis(a: Tensor, axis):
    if axis is None or axis == "all":
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"axis {ax} invalid for shape {a.shape}")
        out.append(ax % a.ndim)
    return tuple(out)


def _expand(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce(op_kind: str, a, axis=None, keepdims: bool = False) -> Tensor:
    """``sum``/``mean``/``max`` over ``axis`` (an int, tuple, ``None`` or ``"all"``)."""
    a = _wrap(a)
    axes = _norm_axis(a, axis)
    if op_kind == "sum":
        out = a.data.sum(axis=axes, keepdims=keepdims)

        def back(g):
            return (_expand(g, a.shape, axes, keepdims).astype(_dt()),)

    elif op_kind == "mean":
        out = a.data.mean(axis=axes, keepdims=keepdims)
        count = a.data.size // max(out.size, 1)

        def back(g):
            return (_expand(g / _dt()(count), a.shape, axes, keepdims).astype(_dt()),)

    elif op_kind == "max":
        out = a.data.max(axis=axes, keepdims=keepdims)

        def back(g):
            full = _expand(out, a.shape, axes, keepdims)
            mask = (a.data == full).astype(_dt())
            mask /= mask.sum(axis=axes, keepdims=True)
            return (mask * _expand(g, a.shape, axes, keepdims),)

    else:
        raise ValueError(f"unknown reduction {op_kind!r}")
    return _make(out, (a,), back, op_kind)


# -- fused numerics -------------------------------------------------------------


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    _norm_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    _norm_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, dim: int) -> "RunningStats":
        return cls(np.zeros(dim, dtype=_dt()), np.ones(dim, dtype=_dt()))


def batch_norm(
    x,
    gamma,
    beta,
    mode: str = "train",
    running_stats: RunningStats | None = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-dimension batch normalization of a ``B x D`` matrix.

    In ``"train"`` mode the batch statistics (population variance) are used
    and ``running_stats``, if given, is updated in place. ``"eval"`` mode
    normalizes with ``running_stats`` instead.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"batch_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape} are inconsistent"
        )
    if mode == "train":
        b = x.shape[0]
        if b < 2:
            raise BatchSizeError(f"batch_norm in training mode needs B >= 2, got {b}")
        mu = x.data.mean(axis=0)
        centered = x.data - mu
        var = (centered * centered).mean(axis=0)
        inv_std = (1.0 / np.sqrt(var + _dt()(eps))).astype(_dt())
        xhat = centered * inv_std
        if running_stats is not None:
            m = _dt()(momentum)
            running_stats.mean[...] = (1 - m) * running_stats.mean + m * mu
            running_stats.var[...] = (1 - m) * running_stats.var + m * var * _dt()(b / (b - 1))

        def back(g):
            gx = gb = gbt = None
            if x.requires_grad:
                dxhat = g * gamma.data
                gx = (inv_std / _dt()(b)) * (
                    _dt()(b) * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            if gamma.requires_grad:
                gb = (g * xhat).sum(axis=0)
            if beta.requires_grad:
                gbt = g.sum(axis=0)
            return gx, gb, gbt

    elif mode == "eval":
        if running_stats is None:
            raise ValueError("batch_norm in eval mode needs running_stats")
        inv_std = (1.0 / np.sqrt(running_stats.var + _dt()(eps))).astype(_dt())
        xhat = (x.data - running_stats.mean) * inv_std

        def back(g):
            gx = g * gamma.data * inv_std if x.requires_grad else None
            gb = (g * xhat).sum(axis=0) if gamma.requires_grad else None
            gbt = g.sum(axis=0) if beta.requires_grad else None
            return gx, gb, gbt

    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    out = gamma.data * xhat + beta.data
    return _make(out, (x, gamma, beta), back, "batch_norm")


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
