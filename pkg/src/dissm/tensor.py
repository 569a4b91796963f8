"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that records its
parents and a closure mapping the output gradient to one gradient per parent.
:func:`backward` walks the recorded graph once in reverse topological order.

Training runs in float32. A float64 "verification" precision exists for
gradient checks and oracles; mixing the two in one operation raises
:class:`DTypeMismatchError` instead of silently promoting.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "DTypeMismatchError",
    "NumericDomainError",
    "ContractError",
    "MacCounter",
    "count_macs",
    "tally",
    "no_grad",
    "grad_enabled",
    "precision",
    "default_dtype",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "silu",
    "softplus",
    "clamp_min",
    "layer_norm",
    "softmax_last",
    "concat",
    "flip",
    "take_rows",
    "backward",
    "zero_grads",
    "tsum",
    "tmean",
    "power",
    "reshape",
    "transpose",
    "getitem",
    "broadcast_shape",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DTypeMismatchError(TypeError):
    """Operands of one operation carry different floating point widths."""


class NumericDomainError(ArithmeticError):
    """An operation left its numeric domain (log of a non-positive, exp overflow...)."""


class ContractError(RuntimeError):
    """A calling contract was violated (e.g. backward on a non-scalar)."""


# ---------------------------------------------------------------------------
# global state: precision, grad mode, MAC counters

_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}
_default_dtype = _DTYPES["float32"]
_grad_enabled = True
_counters: list["MacCounter"] = []


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    saved = _default_dtype
    _default_dtype = _DTYPES[name]
    try:
        yield
    finally:
        _default_dtype = saved


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


def grad_enabled() -> bool:
    return _grad_enabled


class MacCounter:
    """Multiply-accumulate tallies keyed by scope name.

    One multiply-accumulate counts as one flop; nonlinearities are not counted.
    """

    def __init__(self) -> None:
        self.counts: Counter[str] = Counter()

    def add(self, scope: str, n: int) -> None:
        self.counts[scope] += int(n)

    def total(self, *scopes: str) -> int:
        if not scopes:
            return sum(self.counts.values())
        return sum(self.counts[s] for s in scopes)

    def __repr__(self) -> str:
        return f"MacCounter({dict(self.counts)})"


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def tally(scope: str, n: int) -> None:
    for c in _counters:
        c.add(scope, n)


# ---------------------------------------------------------------------------
# the tensor type


class Tensor:
    """An immutable n-d array that may participate in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            dtype = dtype or data.dtype
            data = data.data
        # new tensors adopt the active precision unless told otherwise
        dt = np.dtype(dtype) if dtype is not None else _default_dtype
        if dt not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {dt}")
        self.data: np.ndarray = np.asarray(data, dtype=dt)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{g}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad)


# ---------------------------------------------------------------------------
# helpers


def _coerce(*items) -> tuple[Tensor, ...]:
    """Wrap python scalars / arrays as tensors, enforcing a single dtype."""
    dts = {x.dtype for x in items if isinstance(x, Tensor)}
    if len(dts) > 1:
        raise DTypeMismatchError(
            "operands mix " + " and ".join(sorted(d.name for d in dts)) + "; convert explicitly"
        )
    dt = dts.pop() if dts else _default_dtype
    out = []
    for x in items:
        if isinstance(x, Tensor):
            out.append(x)
        elif isinstance(x, np.ndarray) and x.dtype.kind == "f" and x.dtype != dt:
            raise DTypeMismatchError(f"array of {x.dtype.name} mixed with {dt.name} tensor")
        else:
            out.append(Tensor(np.asarray(x, dtype=dt)))
    return tuple(out)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], back, op: str) -> Tensor:
    out = Tensor(data, dtype=parents[0].dtype if parents else None)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = back
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` following trailing-axis broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Trailing-axis broadcast of two shapes, raising :class:`DimensionError` on conflict."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"shapes {a} and {b} are not broadcastable")
        out.append(max(x, y) if min(x, y) != 0 else 0)
    return tuple(reversed(out))


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericDomainError("division by zero")
    out = ad / bd

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), back, "div")


def power(a, exponent: float) -> Tensor:
    (a,) = _coerce(a)
    if not isinstance(exponent, (int, float)):
        raise TypeError("only scalar exponents are supported")
    ad = a.data
    if exponent < 0 and np.any(ad == 0):
        raise NumericDomainError("negative power of zero")
    return _result(ad ** exponent, (a,),
                   lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(a) -> Tensor:
    (a,) = _coerce(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    if not np.all(np.isfinite(out)) and np.all(np.isfinite(a.data)):
        raise NumericDomainError(f"exp overflow (max input {a.data.max():.4g})")
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    (a,) = _coerce(a)
    ad = a.data
    if np.any(ad <= 0):
        raise NumericDomainError(f"log of non-positive value (min {ad.min():.4g})")
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    (a,) = _coerce(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form stays finite for any input
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    (a,) = _coerce(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a) -> Tensor:
    (a,) = _coerce(a)
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    (a,) = _coerce(a)
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def clamp_min(a, lo: float) -> Tensor:
    (a,) = _coerce(a)
    x = a.data
    keep = x >= lo
    return _result(np.maximum(x, lo).astype(x.dtype, copy=False), (a,),
                   lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    (a,) = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), back, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    (a,) = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    (a,) = _coerce(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    (a,) = _coerce(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, index) -> Tensor:
    (a,) = _coerce(a)
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays or python ints, not tensors")
    shape, dt = a.shape, a.dtype
    out = a.data[index]
    advanced = _has_advanced(index)

    def back(g):
        full = np.zeros(shape, dtype=dt)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(out, copy=True), (a,), back, "getitem")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take_rows(table, idx) -> Tensor:
    """Embedding lookup: rows of a 2-d table selected by an integer array."""
    idx = np.asarray(idx, dtype=np.int64)
    (table,) = _coerce(table)
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-d table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    return getitem(table, idx)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = _coerce(*items)
    ax = axis % items[0].ndim
    sizes = [t.shape[ax] for t in items]
    try:
        out = np.concatenate([t.data for t in items], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in items]} on axis {axis}") from exc
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(items)
        )

    return _result(out, items, back, "concat")


def flip(a, axis: int) -> Tensor:
    (a,) = _coerce(a)
    return _result(np.flip(a.data, axis).copy(), (a,), lambda g: (np.flip(g, axis).copy(),), "flip")


# ---------------------------------------------------------------------------
# contractions


def _dense(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x) if 0 in x.strides and x.size > 1 else x


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes, batch axes broadcast."""
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1:
        raise DimensionError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    if a2.shape[-1] != b2.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    batch = broadcast_shape(a2.shape[:-2], b2.shape[:-2])
    m, k = a2.shape[-2:]
    n = b2.shape[-1]
    tally("matmul", int(np.prod(batch, dtype=np.int64)) * m * k * n)
    # numpy only dispatches to BLAS for operands without zero strides
    out2 = np.matmul(_dense(a2), _dense(b2))

    def back(g):
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g2, np.swapaxes(b2, -1, -2)), a2.shape).reshape(ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a2, -1, -2), g2), b2.shape).reshape(bd.shape)
        return ga, gb

    out = out2
    if ad.ndim == 1:
        out = out.squeeze(-2)
    if bd.ndim == 1:
        out = out.squeeze(-1)
    return _result(out, (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# fused normalisation ops


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply an optional affine map."""
    parts = [x] + [p for p in (gamma, beta) if p is not None]
    coerced = _coerce(*parts)
    x = coerced[0]
    rest = list(coerced[1:])
    g = rest.pop(0) if gamma is not None else None
    b = rest.pop(0) if beta is not None else None
    d = x.shape[-1]
    for p in (g, b):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm parameter shape {p.shape} does not match last extent {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if g is not None:
        out = out * g.data
    if b is not None:
        out = out + b.data
    parents = tuple(p for p in (x, g, b) if p is not None)

    def back(grad):
        grads = []
        gx_hat = grad * g.data if g is not None else grad
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads.append(gx)
        lead = tuple(range(grad.ndim - 1))
        if g is not None:
            grads.append((grad * xhat).sum(axis=lead))
        if b is not None:
            grads.append(grad.sum(axis=lead))
        return tuple(grads)

    return _result(out.astype(xd.dtype, copy=False), parents, back, "layer_norm")


def softmax_last(x) -> Tensor:
    (x,) = _coerce(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# reverse pass


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    The graph is consumed: interior nodes drop their parents and closures.
    When ``params`` is given, returns ``{name: grad}`` with exact zeros for
    parameters the loss does not depend on.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if loss.requires_grad:
        order = _topo_order(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    pg = np.asarray(pg, dtype=parent.dtype)
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
            node._parents = ()
            node._backward = None
    if params is None:
        return {}
    return {
        name: (p.grad if p.grad is not None else np.zeros(p.shape, dtype=p.dtype))
        for name, p in params.items()
    }


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None

