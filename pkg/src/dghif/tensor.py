"""Dense tensors with a reverse-mode gradient tape.

Values are numpy arrays; every differentiable operation records a node on
the active tape with a local vector-Jacobian rule. ``backward`` walks the
tape in exact reverse recording order, accumulating gradients additively
across fan-out. Only leading-batch broadcasting is allowed: a smaller
operand must match the trailing dimensions of the larger one.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError, ShapeError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_PRECISION = "f32"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYERNORM_EPS = 1e-5


def set_precision(name: str) -> None:
    """Set the dtype for tensors created from here on ("f32" or "f64")."""
    global _PRECISION
    if name not in _DTYPES:
        raise DomainError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _PRECISION = name


def precision() -> str:
    return _PRECISION


def float_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_PRECISION])


class Tensor:
    """An n-dimensional value, optionally tracked on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_producer")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=float_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._producer: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "inputs", "out", "vjp")

    def __init__(self, op, inputs, out, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._producer is tape


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        out._producer = tape
        tape.nodes.append(_Node(op, tuple(inputs), out, vjp))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``grad`` on every tracked tensor reachable from ``loss``."""
    tape = tape or Tape.active()
    if tape is None:
        raise DomainError("backward() called with no active tape")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.out.grad
        if out_grad is None:
            continue
        for t, g in zip(node.inputs, node.vjp(out_grad)):
            if g is None or not _tracked(t, tape):
                continue
            if t.grad is None:
                t.grad = g.astype(t.data.dtype, copy=True)
            else:
                t.grad += g


# ---------------------------------------------------------------------------
# broadcasting helpers (leading-batch only)

def _check_ew_shapes(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform "
                         "(only leading-batch broadcast is allowed)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_ew_shapes("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _record("add", (a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_ew_shapes("sub", a, b)
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _record("sub", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_ew_shapes("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd

    def vjp(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _record("mul", (a, b), out, vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_ew_shapes("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: denominator contains zero")
    out = ad / bd

    def vjp(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * ad / (bd * bd), bd.shape)

    return _record("div", (a, b), out, vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: shapes {ad.shape} and {bd.shape} do not conform")
    la, lb = ad.shape[:-2], bd.shape[:-2]
    if la != lb and la != () and lb != ():
        raise ShapeError(f"matmul: batch dims {la} and {lb} do not conform "
                         "(only a 2-d operand may broadcast)")
    out = np.matmul(ad, bd)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _reduce_to(ga, ad.shape), _reduce_to(gb, bd.shape)

    return _record("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _record("reshape", (a,), out, vjp)


def transpose_last2(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last2: needs ndim >= 2, got shape {a.data.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose_last2", (a,), out, vjp)


def concat_last(parts: Iterable[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading dims differ, "
                             f"{parts[0].data.shape} vs {p.data.shape}")
    sizes = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)

    def vjp(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, np.cumsum(sizes)[:-1], axis=-1))

    return _record("concat_last", tuple(parts), out, vjp)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = a.data[..., start:stop]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _record("slice_last", (a,), out, vjp)


def _index_add(ids: np.ndarray, values: np.ndarray, n_rows: int,
               dtype: np.dtype) -> np.ndarray:
    """Sum rows of ``values`` into ``n_rows`` buckets (fast np.add.at)."""
    flat_ids = ids.reshape(-1)
    flat = values.reshape(-1, values.shape[-1]) if values.ndim > 1 else values
    if values.ndim >= 2:
        out = np.empty((n_rows, flat.shape[1]), dtype=dtype)
        for col in range(flat.shape[1]):
            out[:, col] = np.bincount(flat_ids, weights=flat[:, col],
                                      minlength=n_rows)
        return out
    return np.bincount(flat_ids, weights=flat, minlength=n_rows).astype(dtype)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of ``x`` by scalar ``s[i]``."""
    x, s = _as_tensor(x), _as_tensor(s)
    if s.data.shape != (x.data.shape[0],):
        raise ShapeError(f"scale_rows: scale shape {s.data.shape} does not match "
                         f"rows of {x.data.shape}")
    col = s.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out = x.data * col

    def vjp(g):
        gs = (g * x.data).sum(axis=tuple(range(1, x.data.ndim)))
        return g * col, gs

    return _record("scale_rows", (x, s), out, vjp)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (embedding lookup); grad scatter-adds back."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"take_rows: id out of range for table with "
                         f"{table.data.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        if table.data.ndim == 2:
            return (_index_add(ids, g, table.data.shape[0], table.data.dtype),)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _record("take_rows", (table,), out, vjp)


def scatter_rows_add(x: Tensor, ids: np.ndarray, n_rows: int) -> Tensor:
    """Sum rows of ``x`` into ``n_rows`` buckets given by ``ids``."""
    x = _as_tensor(x)
    ids = np.asarray(ids)
    if ids.shape != (x.data.shape[0],):
        raise ShapeError(f"scatter_rows_add: ids shape {ids.shape} does not index "
                         f"rows of {x.data.shape}")
    if x.data.ndim == 2:
        out = _index_add(ids, x.data, n_rows, x.data.dtype)
    else:
        out = np.zeros((n_rows,) + x.data.shape[1:], dtype=x.data.dtype)
        np.add.at(out, ids, x.data)

    def vjp(g):
        return (g[ids],)

    return _record("scatter_rows_add", (x,), out, vjp)


# ---------------------------------------------------------------------------
# reductions

def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape).copy(),)

    return _record("mean", (a,), out, vjp)


# ---------------------------------------------------------------------------
# nonlinearities

def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, vjp)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, vjp)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input contains non-positive values")
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record("log", (a,), out, vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x), not the tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (phi + x * pdf),)

    return _record("gelu", (a,), out, vjp)


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = x * s

    def vjp(g):
        return (g * (s + x * s * (1.0 - s)),)

    return _record("silu", (a,), out, vjp)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, floor)

    def vjp(g):
        return (g * (a.data > floor),)

    return _record("clamp_min", (a,), out, vjp)


def softmax_last(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False positions get weight exactly 0."""
    a = _as_tensor(a)
    x = a.data
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise DomainError("softmax_last: a row is entirely masked")
        neg = np.where(mask, x, -np.inf)
        e = np.exp(neg - neg.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _record("softmax_last", (a,), out, vjp)


def layer_norm(a: Tensor, scale: Tensor, shift: Tensor,
               eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis with learnable scale and shift."""
    a, scale, shift = _as_tensor(a), _as_tensor(scale), _as_tensor(shift)
    h = a.data.shape[-1]
    if scale.data.shape != (h,) or shift.data.shape != (h,):
        raise ShapeError(f"layer_norm: scale/shift must have shape ({h},), got "
                         f"{scale.data.shape} and {shift.data.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * scale.data + shift.data

    def vjp(g):
        g_shift = _reduce_to(g, shift.data.shape)
        g_scale = _reduce_to(g * xhat, scale.data.shape)
        gx_hat = g * scale.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_scale, g_shift

    return _record("layer_norm", (a, scale, shift), out, vjp)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate); identity in eval mode."""
    a = _as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout: rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise DomainError("dropout: train mode requires an rng")
    keep = (rng.random(a.data.shape) >= rate).astype(a.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out = a.data * keep * scale

    def vjp(g):
        return (g * keep * scale,)

    return _record("dropout", (a,), out, vjp)


# ---------------------------------------------------------------------------
# fused, numerically stable losses

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy of sigmoid(logits) against {0,1} targets."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.data.shape:
        raise ShapeError(f"bce_with_logits: targets shape {targets.shape} does not "
                         f"match logits shape {logits.data.shape}")
    if not np.isin(targets, (0.0, 1.0)).all():
        raise DomainError("bce_with_logits: labels must be in {0, 1}")
    x = logits.data
    losses = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    n = max(x.size, 1)
    out = losses.sum() / n

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * (s - targets) / n,)

    return _record("bce_with_logits", (logits,), out, vjp)


def cross_entropy_logits(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Mean cross entropy of row-wise softmax(logits) against integer targets."""
    logits = _as_tensor(logits)
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy_logits: logits must be 2-d, got {x.shape}")
    ids = np.asarray(target_ids)
    if ids.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy_logits: targets shape {ids.shape} does not "
                         f"index rows of {x.shape}")
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    n = x.shape[0]
    out = (lse - x[np.arange(n), ids]).sum() / n

    def vjp(g):
        soft = np.exp(x - m)
        soft /= soft.sum(axis=-1, keepdims=True)
        soft[np.arange(n), ids] -= 1.0
        return (g * soft / n,)

    return _record("cross_entropy_logits", (logits,), out, vjp)


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor],
               step: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic (dropout in eval mode) and return a scalar.
    Returns the max relative error per parameter; report-only, no asserts.
    Run under 64-bit precision for meaningful comparisons.
    """
    with Tape() as tape:
        loss = fn()
        for p in params.values():
            p.grad = None
        backward(loss, tape)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report[name] = float((np.abs(a - numeric) / denom).max()) if flat.size else 0.0
    return report
