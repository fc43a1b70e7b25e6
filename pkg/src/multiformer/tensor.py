"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operations the model needs: matmul, masked softmax,
1-D convolution, layer normalization, elementwise arithmetic, embedding
lookup, concatenation and basic slicing.  Storage is a row-major numpy
array in a global precision mode: float32 by default (training), float64
for gradient checks and oracle comparisons, where finite differences are
actually trustworthy.

Gradients accumulate across backward() calls until explicitly zeroed,
matching the usual training-loop contract.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_active_dtype = np.float32


def default_dtype():
    """The numpy dtype new tensors are created with."""
    return _active_dtype


def set_default_dtype(name: str) -> None:
    global _active_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _active_dtype = _DTYPES[name]


@contextmanager
def using_dtype(name: str):
    """Temporarily switch the global precision mode."""
    global _active_dtype
    prev = _active_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _active_dtype = prev


class Tensor:
    """A dense n-d array with optional gradient tracking.

    Tensors built from operations remember their parents and a backward
    rule; calling backward() on a scalar result fills .grad on every
    reachable tensor that has requires_grad set.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _active_dtype:
            arr = arr.astype(_active_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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
    def mT(self) -> "Tensor":
        """Swap the last two axes."""
        return _make(np.swapaxes(self.data, -1, -2), (self,),
                     lambda g: (np.swapaxes(g, -1, -2),))

    def item(self) -> float:
        return float(self.data)

    def detached(self) -> "Tensor":
        """Same values, no graph connection, no gradient tracking."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar.

        Contributions are added into .grad, so repeated calls without
        zeroing accumulate.
        """
        if self.data.ndim != 0:
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no tracked dependencies")
        order = _topo_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.data.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add(self, -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        data = self.data[idx]

        def bw(g):
            z = np.zeros_like(self.data)
            z[idx] = g
            return (z,)

        return _make(data, (self,), bw)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape

        def bw(g):
            return (g.reshape(src),)

        return _make(self.data.reshape(shape), (self,), bw)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


@dataclass
class Parameter:
    """A named trainable tensor.  Names are dot-separated paths, unique
    within a model; lexicographic name order fixes checkpoint layout."""

    name: str
    tensor: Tensor


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Internal node constructor; skips dtype normalization and drops the
    graph entirely when no parent tracks gradients."""
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t.requires_grad = False
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _make(a.data + b, (a,), lambda g: (_unbroadcast(g, a.shape),))
    data = a.data + b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _make(a.data * b, (a,), lambda g: (_unbroadcast(g * b, a.shape),))
    data = a.data * b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    data = a.data ** p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1),))


def texp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)
    return _make(data, (a,), lambda g: (g * (a.data > 0),))


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(g.dtype, copy=False),)
        gx = g
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx, a.shape),)

    return _make(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        gx = g / count
        if axis is None:
            return (np.broadcast_to(gx, a.shape).astype(a.data.dtype, copy=False),)
        if not keepdims:
            gx = np.expand_dims(gx, axis)
        return (np.broadcast_to(gx, a.shape),)

    return _make(data, (a,), bw)


# -- shape manipulation ----------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bw)


def stack_last(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new trailing axis."""
    data = np.stack([t.data for t in tensors], axis=-1)

    def bw(g):
        return tuple(g[..., i] for i in range(len(tensors)))

    return _make(data, tuple(tensors), bw)


def pad_time(a: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad along the second-to-last (time) axis."""
    if before == 0 and after == 0:
        return a
    width = [(0, 0)] * a.ndim
    width[-2] = (before, after)
    data = np.pad(a.data, width)
    t = a.shape[-2]

    def bw(g):
        return (g[..., before:before + t, :],)

    return _make(data, (a,), bw)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), bw)


# -- softmax family ----------------------------------------------------------


def masked_softmax(logits: Tensor, mask=None, empty_rows: str = "error") -> Tensor:
    """Softmax over the last axis; positions where mask is False get weight
    exactly 0 and the remaining weights sum to 1 per row.

    mask may be any boolean array broadcastable to logits.shape (or None).
    A row with no unmasked position raises by default; empty_rows="zero"
    instead yields an all-zero row, which callers use for rows whose
    output is discarded (e.g. queries at padded positions).
    """
    x = logits.data
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        s = e / e.sum(axis=-1, keepdims=True)
        mask_b = None
    else:
        mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        any_valid = mask_b.any(axis=-1)
        if not any_valid.all():
            if empty_rows == "error":
                rows = np.argwhere(~any_valid)[:5]
                raise ValueError(
                    f"softmax row(s) fully masked at index {rows.tolist()}")
            elif empty_rows != "zero":
                raise ValueError(f"unknown empty_rows mode {empty_rows!r}")
        neg = np.where(mask_b, x, -np.inf)
        rowmax = neg.max(axis=-1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.where(mask_b, np.exp(neg - rowmax), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        s = e / np.where(denom == 0.0, 1.0, denom)

    def bw(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), bw)


# -- lookups -----------------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape index the first axis of table."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError("embedding ids must be integers")
    data = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, (table,), bw)


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one element along the last axis per leading position."""
    ids = np.asarray(ids)
    data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def bw(g):
        z = np.zeros_like(x.data)
        np.put_along_axis(z, ids[..., None], g[..., None], axis=-1)
        return (z,)

    return _make(data, (x,), bw)


# -- composite layers ---------------------------------------------------------


def conv1d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """1-D convolution over the time axis.

    x: [..., T, D_in], weights: [K, D_in, D_out], bias: [D_out].
    Zero-padding on both ends; output length (T + 2*padding - K)//stride + 1.
    """
    if weights.ndim != 3:
        raise ValueError(f"conv1d weights must be [K, D_in, D_out], got {weights.shape}")
    k_size = weights.shape[0]
    if k_size < 1 or stride < 1 or padding < 0:
        raise ValueError("conv1d needs K >= 1, stride >= 1, padding >= 0")
    t = x.shape[-2]
    if t + 2 * padding < k_size:
        raise ValueError(
            f"conv1d input too short: T={t} with padding {padding} < kernel {k_size}")
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"conv1d channel mismatch: {x.shape} vs {weights.shape}")
    t_out = (t + 2 * padding - k_size) // stride + 1
    xp = pad_time(x, padding, padding)
    out = None
    for k in range(k_size):
        xs = xp[..., k:k + stride * (t_out - 1) + 1:stride, :]
        term = matmul(xs, weights[k])
        out = term if out is None else out + term
    return out + bias


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    return centered * inv * gain + bias


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, keep)


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.tensor.grad = None


# -- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int
    ok: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 0.0

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.ok]

    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)


def grad_check(f: Callable[[], Tensor], params: Sequence[Parameter],
               step: float = 1e-4, tolerance: float = 1e-4,
               max_samples: int = 256, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of f() against central finite differences.

    f must be a deterministic scalar-valued closure over params, evaluated
    in float64 mode (finite differences are junk in float32).  Tensors
    larger than max_samples are subsampled at seeded random positions.
    Relative error uses a unit floor: |a-n| / max(|a|, |n|, 1).
    """
    if default_dtype() is not np.float64:
        raise ValueError("grad_check requires the float64 precision mode")
    for p in params:
        if p.tensor.data.dtype != np.float64:
            raise ValueError(f"parameter {p.name} is not float64")

    zero_grad(params)
    loss = f()
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.tensor.data) if p.tensor.grad is None
                         else p.tensor.grad.copy()) for p in params}
    zero_grad(params)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        flat = p.tensor.data.reshape(-1)
        size = flat.size
        if size <= max_samples:
            idxs = np.arange(size)
        else:
            idxs = np.sort(rng.choice(size, size=max_samples, replace=False))
        a_flat = analytic[p.name].reshape(-1)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f().data)
            flat[i] = orig - step
            f_minus = float(f().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)
        report.entries.append(GradCheckEntry(
            name=p.name, max_rel_err=worst, checked=len(idxs),
            ok=worst <= tolerance))
    return report
