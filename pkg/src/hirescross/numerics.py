"""Dense tensor kernels with tape-based reverse-mode differentiation.

Only what the decoder needs: matmul, softmax, layernorm, GELU, scaled
dot-product attention, embedding lookup and cross-entropy, plus the
reshaping glue between them.  Tensors wrap numpy arrays; every kernel
returns a new :class:`Tensor` and, when a :class:`GradTape` is active and
some input requires a gradient, appends a backward closure to the tape.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

CHECK_FINITE = True


class NumericsError(ValueError):
    """Shape, domain or finiteness violation inside a kernel."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

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

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeRecord:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered record of executed kernels.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on the scalar result.  Records are replayed strictly
    in reverse order.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
        if seed_grad is None:
            if loss.size != 1:
                raise NumericsError("backward needs a scalar loss or an explicit seed gradient")
            seed_grad = np.ones_like(loss.data)
        intermediate: dict[int, np.ndarray] = {id(loss): seed_grad}
        produced = {id(r.out) for r in self.records}
        for rec in reversed(self.records):
            g = intermediate.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    prev = intermediate.get(id(inp))
                    intermediate[id(inp)] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        if id(loss) not in produced and loss.requires_grad:
            loss.grad = seed_grad if loss.grad is None else loss.grad + seed_grad


_TAPES: list[GradTape] = []
_FLOPS: list[Counter] = []


@contextlib.contextmanager
def flop_counter() -> Iterator[Counter]:
    """Collect FLOPs reported by kernels, keyed by category.

    One multiply-add counts as 2 FLOPs.  ``matmul`` reports under
    ``"matmul"``; :func:`sdpa` reports its score, softmax and value
    products under ``"attention"``.
    """
    counts: Counter = Counter()
    _FLOPS.append(counts)
    try:
        yield counts
    finally:
        _FLOPS.remove(counts)


def _report(category: str, n: int) -> None:
    for c in _FLOPS:
        c[category] += n


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"{op}: non-finite values in output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _TAPES:
        _TAPES[-1].records.append(TapeRecord(op, out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _finish(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _finish(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _finish("scale", a.data * b, (a,), lambda g: (g * b,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _finish(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _finish("gelu", out, (x,), backward)


# ---------------------------------------------------------------------------
# shape glue
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _finish("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    return _finish(
        "concat",
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Select entries along ``axis`` (a gather; repeated indices accumulate)."""
    index = np.asarray(index, dtype=np.intp)
    ax = axis % x.ndim

    def backward(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, ax, 0)
        np.add.at(moved, index, np.moveaxis(g, ax, 0))
        return (out,)

    return _finish("take", np.take(x.data, index, axis=ax), (x,), backward)


def total(x: Tensor) -> Tensor:
    return _finish("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _finish("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full_like(x.data, g / n),))


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise NumericsError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise NumericsError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    _report("matmul", 2 * batch * m * k * n)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", out, (a, b), backward)


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise NumericsError("softmax over an empty axis")
    p = _softmax_np(x.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", p, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if d < 2 and eps == 0:
        raise NumericsError("layernorm over a single feature with eps=0 divides by zero")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _finish("layernorm", out, (x, gain, bias), backward)


def sdpa(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    ``mask`` is a boolean array broadcastable to ``[..., Lq, Lk]``; False
    entries are excluded.  Every query must keep at least one key.
    """
    lq, d = q.shape[-2:]
    lk = k.shape[-2]
    if lk == 0:
        raise NumericsError("sdpa with no keys")
    if k.shape[-1] != d:
        raise NumericsError(f"query/key head dims differ: {d} vs {k.shape[-1]}")
    if v.shape[-2] != lk:
        raise NumericsError("keys and values must have the same length")
    dv = v.shape[-1]
    scale = 1.0 / math.sqrt(d)
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise NumericsError("attention mask leaves a query without keys")
        s = np.where(mask, s, -np.inf)
    p = _softmax_np(s, -1)
    out = np.matmul(p, v.data)

    heads = int(np.prod(s.shape[:-2])) if s.ndim > 2 else 1
    _report("attention", heads * (2 * lq * lk * d + 5 * lq * lk + 2 * lq * lk * dv))

    def backward(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape), _unbroadcast(gv, v.shape)

    res = _finish("sdpa", out, (q, k, v), backward)
    return (res, p) if return_weights else res


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError(f"token id out of range for vocabulary of {table.shape[0]}")

    def backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _finish("embedding", table.data[ids], (table,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean token cross-entropy; ``weights`` masks positions (0 = ignored)."""
    targets = np.asarray(targets, dtype=np.intp)
    if weights is None:
        weights = np.ones(targets.shape, dtype=logits.data.dtype)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    denom = weights.sum()
    if denom <= 0:
        raise NumericsError("cross_entropy with no weighted targets")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum() / denom

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * (weights / denom)[..., None],)

    return _finish("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def gradients(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Analytic gradients of scalar ``f()``; frozen parameters get exact zeros."""
    for p in params:
        p.grad = None
    with GradTape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericsError("non-finite loss; gradient check aborted")
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over trainable parameter entries of |analytic - numeric| / max(1, |numeric|).

    Central differences; ``f`` must be scalar valued and should run in
    double precision.
    """
    analytic = gradients(f, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise NumericsError("grad_check needs contiguous parameter arrays")
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericsError("non-finite loss; gradient check aborted")
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(gflat[i] - num) / max(1.0, abs(num)))
    return worst
