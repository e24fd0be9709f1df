"""Dense N-D tensors with reverse-mode automatic differentiation.

The array payload is a numpy ndarray in float64 (the reference dtype) or
float32 (permitted for training speed).  Every operation is a pure function:
it reads its operands, allocates a fresh output and records a backward
closure, so results are bitwise reproducible and safe to share across
threads.  Reductions use numpy's fixed pairwise summation order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
_ALLOWED_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite data."""


def check_finite(arr: np.ndarray, what: str) -> None:
    """Raise NumericError if `arr` contains NaN or Inf."""
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NumericError(f"{what}: {bad} non-finite value(s) in shape {tuple(arr.shape)}")


class Tensor:
    """N-D real array with optional gradient.

    4-D tensors use the (batch, channel, height, width) layout convention.
    `data` is row-major; `grad` (when populated by backward()) always has
    the same shape and dtype as `data`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, check: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if check:
            check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- metadata ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history."""
        return Tensor(self.data.copy(), check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- autodiff ----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; accumulates into .grad fields."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor_like(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor_like(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype), check=False)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) and g.base is not None else np.asarray(g)
    else:
        t.grad = t.grad + g


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in ts)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, check=False)
    if _grad_enabled and _needs_grad(*parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
    return out


# -- broadcasting ----------------------------------------------------------
#
# Exact-shape operands plus the two patterns attention maps need: a [N,C]
# channel weight against [N,C,H,W], and a [N,1,H,W] spatial weight against
# [N,C,H,W].  Anything else that numpy broadcasting accepts after the [N,C]
# promotion also works (e.g. [N,C,1,1] means).


def _promote_shapes(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    da, db = a.data, b.data
    if da.shape == db.shape:
        return da, db
    if da.ndim == 2 and db.ndim == 4 and da.shape == db.shape[:2]:
        da = da.reshape(da.shape + (1, 1))
    elif db.ndim == 2 and da.ndim == 4 and db.shape == da.shape[:2]:
        db = db.reshape(db.shape + (1, 1))
    try:
        np.broadcast_shapes(da.shape, db.shape)
    except ValueError:
        raise ShapeError(f"operands do not broadcast: {a.shape} vs {b.shape}") from None
    return da, db


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcast)."""
    if grad.shape == tuple(shape):
        return grad
    promoted = shape
    if len(shape) == 2 and grad.ndim == 4 and tuple(shape) == grad.shape[:2]:
        promoted = tuple(shape) + (1, 1)
    while grad.ndim > len(promoted):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(promoted):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_dtypes(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.dtype.name} vs {b.dtype.name}")


# -- elementwise primitives ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "add")
    da, db = _promote_shapes(a, b)

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(da + db, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "sub")
    da, db = _promote_shapes(a, b)

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(da - db, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "mul")
    da, db = _promote_shapes(a, b)

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * db, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * da, b.shape))

    return _make(da * db, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "div")
    da, db = _promote_shapes(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = da / db
    check_finite(out, "div")

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g / db, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g * da / (db * db), b.shape))

    return _make(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)

    def backward(g):
        _accumulate(x, g * factor)

    return _make(x.data * factor, (x,), backward)


def shift(x: Tensor, offset: float) -> Tensor:
    """Add a scalar constant."""
    offset = x.dtype.type(offset)

    def backward(g):
        _accumulate(x, g)

    return _make(x.data + offset, (x,), backward)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    check_finite(out, "exp")

    def backward(g):
        _accumulate(x, g * out)

    return _make(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    check_finite(out, "log")

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(out, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    # subgradient at 0 is taken as 0 (sign(0) == 0)
    sign = np.sign(x.data)

    def backward(g):
        _accumulate(x, g * sign)

    return _make(np.abs(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, x.dtype.type(0)), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # stable two-branch form: 1/(1+e^-t) for t>=0, e^t/(1+e^t) otherwise
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^t), computed stably."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    sig = np.empty_like(d)
    pos = d >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    sig[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accumulate(x, g * sig)

    return _make(out, (x,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "minimum")
    da, db = _promote_shapes(a, b)
    take_a = da <= db  # ties route the gradient to the first operand

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(np.minimum(da, db), (a, b), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b, "maximum")
    da, db = _promote_shapes(a, b)
    take_a = da >= db

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * ~take_a, b.shape))

    return _make(np.maximum(da, db), (a, b), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the interior."""
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accumulate(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward)


_ELEMENTWISE = {}


def elementwise(op: str, *operands: Tensor, factor: float | None = None) -> Tensor:
    """Dispatch an elementwise op by name: add|sub|mul|exp|abs|relu|sigmoid|scale."""
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}; choose from {sorted(_ELEMENTWISE)}")
    if op == "scale":
        if factor is None:
            raise ValueError("scale requires factor=")
        return scale(operands[0], factor)
    return _ELEMENTWISE[op](*operands)


_ELEMENTWISE.update(
    add=add, sub=sub, mul=mul, exp=exp, abs=absolute,
    relu=relu, sigmoid=sigmoid, scale=scale,
)


# -- reductions and shape ops ---------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _accumulate(x, np.broadcast_to(g / n, x.data.shape))

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels: empty input")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad or p._parents:
                _accumulate(p, g[:, a:b])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"channel_slice [{start}:{stop}] out of range for {x.shape}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        _accumulate(x, gx)

    return _make(x.data[:, start:stop].copy(), (x,), backward)


def take_cells(x: Tensor, n_idx: np.ndarray, y_idx: np.ndarray, x_idx: np.ndarray) -> Tensor:
    """Gather per-cell feature vectors: [N,K,H,W] -> [P,K] at (n, y, x) triples."""
    if x.ndim != 4:
        raise ShapeError(f"take_cells expects 4-D input, got {x.shape}")
    sel = (np.asarray(n_idx), slice(None), np.asarray(y_idx), np.asarray(x_idx))

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, sel, g)
        _accumulate(x, gx)

    return _make(x.data[sel].copy(), (x,), backward)
