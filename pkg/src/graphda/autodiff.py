"""Reverse-mode automatic differentiation over dense numpy arrays.

The :class:`Tensor` wraps an ndarray together with a lazily allocated
gradient buffer and links into a dynamically built computation trace.
Every operation records a backward closure on its output; calling
:func:`backward` on a scalar walks the trace in reverse creation order,
accumulates gradients additively across fan-out, and then frees the trace
so the next forward pass starts clean.

Only the operations the models and losses in this package need are
provided: elementwise arithmetic with broadcasting, matrix products,
reductions, ReLU/exp, row and element gathers, pairwise squared
distances, (log-)softmax, and an im2col expansion for small
convolutions.  Everything runs at 64-bit precision by default; 32-bit
can be selected per tensor or globally.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GradCheckReport",
    "set_default_dtype",
    "get_default_dtype",
    "backward",
    "matmul",
    "relu",
    "exp",
    "softmax",
    "log_softmax",
    "pairwise_sqdist",
    "take_rows",
    "take_per_row",
    "im2col",
    "grad_check",
]


class ShapeError(ValueError):
    """An operation received tensors whose shapes violate its contract."""


_node_ids = itertools.count()

_DTYPE_ALIASES = {
    32: np.float32,
    64: np.float64,
    "32": np.float32,
    "64": np.float64,
    "f32": np.float32,
    "f64": np.float64,
    "float32": np.float32,
    "float64": np.float64,
}

_default_dtype = np.float64


def set_default_dtype(precision) -> None:
    """Set the dtype new tensors use when none is given (32 or 64 bit)."""
    global _default_dtype
    _default_dtype = _resolve_dtype(precision)


def get_default_dtype():
    return _default_dtype


def _resolve_dtype(precision):
    if precision in _DTYPE_ALIASES:
        return _DTYPE_ALIASES[precision]
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {precision!r}; use 32 or 64")
    return dt.type


class Tensor:
    """Dense n-d array carrying a value, a gradient, and trace links.

    ``grad`` stays ``None`` until the first gradient lands.  ``node_id``
    is monotonically increasing with creation order, which makes creation
    order a topological order of any trace.
    """

    __slots__ = ("data", "grad", "node_id", "_parents", "_backward")

    def __init__(self, data, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.dtype(np.float32), np.dtype(np.float64)) else _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, node_id={self.node_id})"

    # -- gradient plumbing ---------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis=None) -> "Tensor":
        return _reduce(self, axis, mean=True)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], bw: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out._parents = parents
    out._backward = bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and broadcast ops --------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        data = a.data + c

        def bw(g):
            a._accum(_unbroadcast(g, a.shape))

        return _result(data, (a,), bw)

    data = a.data + b.data

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _result(data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        data = a.data * c

        def bw(g):
            a._accum(_unbroadcast(g * c, a.shape))

        return _result(data, (a,), bw)

    data = a.data * b.data

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return _result(data, (a, b), bw)


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.data > 0
    data = np.where(mask, a.data, a.data.dtype.type(0))

    def bw(g):
        a._accum(np.where(mask, g, g.dtype.type(0)))

    return _result(data, (a,), bw)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        a._accum(g * data)

    return _result(data, (a,), bw)


# -- reductions and shape ops ---------------------------------------------------


def _reduce(a: Tensor, axis, mean: bool) -> Tensor:
    if axis is None:
        axes = tuple(range(a.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.ndim,)
    else:
        axes = tuple(ax % a.ndim for ax in axis)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    data = a.data.sum(axis=axes if axis is not None else None)
    scale = 1.0 / count if mean else None
    if mean:
        data = data * a.data.dtype.type(scale)

    def bw(g):
        g2 = np.asarray(g)
        for ax in sorted(axes):
            g2 = np.expand_dims(g2, ax)
        g2 = np.broadcast_to(g2, a.shape)
        a._accum(g2 * a.data.dtype.type(scale) if mean else g2)

    return _result(np.asarray(data, dtype=a.data.dtype), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    data = np.reshape(a.data, shape).copy()

    def bw(g):
        a._accum(g.reshape(a.shape))

    return _result(data, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    data = a.data.transpose(axes).copy()

    def bw(g):
        a._accum(g.transpose(inv))

    return _result(data, (a,), bw)


# -- gathers ---------------------------------------------------------------------


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows ``a[idx]``; backward scatter-adds into the sources."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx].copy()

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, idx, g)
        a._accum(acc)

    return _result(data, (a,), bw)


def take_per_row(a: Tensor, cols) -> Tensor:
    """Pick one element per row of a 2-d tensor: ``out[i] = a[i, cols[i]]``."""
    if a.ndim != 2:
        raise ShapeError(f"take_per_row expects a 2-d tensor, got shape {a.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row needs one column index per row: {a.shape} vs {cols.shape}")
    rows = np.arange(a.shape[0])
    data = a.data[rows, cols].copy()

    def bw(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (rows, cols), g)
        a._accum(acc)

    return _result(data, (a,), bw)


# -- softmax family ---------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, stabilised by subtracting the row max."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        a._accum(data * (g - inner))

    return _result(data, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def bw(g):
        a._accum(g - soft * g.sum(axis=-1, keepdims=True))

    return _result(data, (a,), bw)


# -- pairwise squared distances ----------------------------------------------------


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances between rows of ``a`` and ``b``.

    ``out[i, j] = ||a[i] - b[j]||^2`` via the Gram expansion.  Values on
    numerically coincident rows can land within ~1e-16 of zero on either
    side; nothing is clamped so the gradient stays exact.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist shape mismatch: {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    sa = np.sum(A * A, axis=1)[:, None]
    sb = np.sum(B * B, axis=1)[None, :]
    data = sa + sb - 2.0 * (A @ B.T)

    def bw(g):
        rs = g.sum(axis=1, keepdims=True)
        cs = g.sum(axis=0, keepdims=True)
        a._accum(2.0 * (rs * A - g @ B))
        b._accum(2.0 * (cs.T * B - g.T @ A))

    return _result(data, (a, b), bw)


# -- im2col -----------------------------------------------------------------------


def im2col(a: Tensor, kh: int, kw: int, padding: int = 0) -> Tensor:
    """Unfold (B, c, h, w) into patch rows for stride-1 convolution.

    Output has shape (B*oh*ow, c*kh*kw) with channel-major columns, so a
    convolution is one matmul against a (c*kh*kw, out_channels) weight.
    """
    if a.ndim != 4:
        raise ShapeError(f"im2col expects (B, c, h, w), got shape {a.shape}")
    bsz, c, h, w = a.shape
    p = padding
    oh, ow = h + 2 * p - kh + 1, w + 2 * p - kw + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"im2col kernel {kh}x{kw} too large for input {a.shape} with padding {p}")
    xp = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    ki = np.repeat(np.arange(kh), kw)
    kj = np.tile(np.arange(kw), kh)
    oi = np.repeat(np.arange(oh), ow)
    oj = np.tile(np.arange(ow), oh)
    rows = oi[:, None] + ki[None, :]
    cols = oj[:, None] + kj[None, :]
    patches = xp[:, :, rows, cols]  # (B, c, oh*ow, kh*kw)
    data = patches.transpose(0, 2, 1, 3).reshape(bsz * oh * ow, c * kh * kw).copy()

    def bw(g):
        gp = g.reshape(bsz, oh * ow, c, kh * kw).transpose(0, 2, 1, 3)
        gx = np.zeros_like(xp)
        np.add.at(gx, (slice(None), slice(None), rows, cols), gp)
        a._accum(gx[:, :, p:p + h, p:p + w])

    return _result(data, (a,), bw)


# -- backward pass ------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate gradients of ``loss`` w.r.t. every tensor it was computed from.

    ``loss`` must be a scalar.  The reachable trace is visited once in
    reverse creation order and freed afterwards, so tensors can be reused
    as leaves in later forward passes.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: -t.node_id)
    loss._accum(np.ones_like(loss.data))
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
        t._parents = ()
        t._backward = None


# -- finite-difference checking --------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of backward gradients to central differences."""

    errors: np.ndarray
    max_error: float
    tol: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, tol: float = 1e-5,
               step: float = 1e-6) -> GradCheckReport:
    """Compare the backward gradient of scalar-valued ``f`` at ``point``
    against central finite differences.

    The relative error guard is ``max(1, |analytic|, |numeric|)`` per
    coordinate; the check passes iff the max error is below ``tol``.
    """
    x = Tensor(np.array(point.data, copy=True), dtype=point.data.dtype)
    out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check requires a scalar-valued function, got shape {out.shape}")
    backward(out)
    analytic = np.zeros(x.shape, dtype=np.float64) if x.grad is None else np.asarray(x.grad, dtype=np.float64).copy()

    numeric = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x).data)
        flat[i] = orig - step
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * step)

    guard = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    errors = np.abs(analytic - numeric) / guard
    max_error = float(errors.max()) if errors.size else 0.0
    return GradCheckReport(errors=errors, max_error=max_error, tol=tol,
                           passed=max_error < tol, analytic=analytic, numeric=numeric)
