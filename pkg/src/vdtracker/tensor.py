"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (f32 or f64). Operations executed while
a Tape is active are recorded as a Wengert list; ``backward`` walks the list
in reverse and accumulates gradients into the ``grad`` field of every leaf
tensor created with ``requires_grad=True``. Repeated backward calls add up.

Supported broadcasting is deliberately narrow: the only shape promotion is a
1-D bias added row-wise to a 2-D matrix. Everything else must match exactly,
which turns silent shape bugs into immediate errors.

Tapes are single-threaded; independent tapes may run in separate threads
(the active tape is thread-local). Weight tensors are safe to share
read-only across threads.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "tensor",
    "zeros",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "vecmat",
    "transpose",
    "concat",
    "stack_rows",
    "select_row",
    "slice_rows",
    "slice_cols",
    "gather_rows",
    "tsum",
    "tmean",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "cross_entropy",
    "gelu",
    "dropout",
    "detach",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


def as_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if dtype in ("f32", "float32", np.float32):
        return np.dtype(np.float32)
    if dtype in ("f64", "float64", np.float64):
        return np.dtype(np.float64)
    raise ValueError(f"unsupported dtype {dtype!r}; use 'f32' or 'f64'")


class Tensor:
    """A dense array plus optional gradient. Immutable in spirit: only the
    optimizer writes ``data`` in place and only ``backward`` touches ``grad``."""

    __slots__ = ("data", "grad", "requires_grad", "_leaf")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=as_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # Small operator sugar; the functional forms below are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=as_dtype(dtype)))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations, one entry per op in execution order.

    An entry is ``(out, inputs, backward_fn)`` where ``backward_fn`` maps the
    adjoint of ``out`` to a tuple of adjoints aligned with ``inputs``. Inputs
    always precede the ops consuming them, so a single reverse sweep visits
    every node exactly once.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, bwd: Callable):
        self._records.append((out, inputs, bwd))

    def owns(self, t: Tensor) -> bool:
        return any(out is t for out, _, _ in self._records)

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every
        requires_grad leaf reachable from ``loss``."""
        if loss.data.shape != ():
            raise ShapeError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        seen_out = False
        for out, inputs, bwd in reversed(self._records):
            g = adjoint.pop(id(out), None)
            if out is loss:
                seen_out = True
            if g is None:
                continue
            grads = bwd(g)
            for t, gt in zip(inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                if t._leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gt
                else:
                    prev = adjoint.get(id(t))
                    adjoint[id(t)] = gt if prev is None else prev + gt
        if not seen_out and not loss._leaf:
            raise ValueError("loss was not recorded on this tape")


def backward(loss: Tensor):
    """Run the active tape's reverse sweep from ``loss``."""
    tape = active_tape()
    if tape is None:
        raise ValueError("no active tape; wrap the forward pass in `with Tape():`")
    tape.backward(loss)


def _wrap(data: np.ndarray, inputs: Sequence[Tensor], bwd: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._leaf = False
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            tape.record(out, tuple(inputs), bwd)
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def detach(t: Tensor) -> Tensor:
    """Constant copy of ``t``: same values, no gradient history."""
    out = Tensor.__new__(Tensor)
    out.data = t.data.copy()
    out.grad = None
    out.requires_grad = False
    out._leaf = True
    return out


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias added to every row of a 2-D
    matrix (the only broadcast this engine performs)."""
    _check_same_dtype(a, b, "add")
    if a.data.shape == b.data.shape:
        return _wrap(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        return _wrap(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: incompatible shapes {a.data.shape} and {b.data.shape}")
    return _wrap(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _check_same_dtype(a, b, "mul")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return _wrap(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _wrap(a.data * np.asarray(c, dtype=a.data.dtype), (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors. Gradients: dA = g Bᵀ, dB = Aᵀ g."""
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data
    return _wrap(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def vecmat(v: Tensor, w: Tensor) -> Tensor:
    """Row-vector times matrix: (k,) @ (k, n) -> (n,)."""
    _check_same_dtype(v, w, "vecmat")
    if v.data.ndim != 1 or w.data.ndim != 2 or v.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"vecmat: incompatible shapes {v.data.shape} @ {w.data.shape}")
    vd, wd = v.data, w.data
    return _wrap(vd @ wd, (v, w), lambda g: (wd @ g, np.outer(vd, g)))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.data.shape}")
    return _wrap(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# Structure: concatenation, slicing, lookup
# ---------------------------------------------------------------------------

def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    ndim = parts[0].data.ndim
    if any(p.data.ndim != ndim for p in parts):
        raise ShapeError("concat: mixed ranks")
    if axis < 0 or axis >= ndim:
        raise ShapeError(f"concat: axis {axis} invalid for rank {ndim}")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        if axis == 0:
            return tuple(g[offsets[i]: offsets[i + 1]] for i in range(len(sizes)))
        return tuple(g[:, offsets[i]: offsets[i + 1]] for i in range(len(sizes)))

    data = np.concatenate([p.data for p in parts], axis=axis)
    return _wrap(data, tuple(parts), bwd)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a 2-D matrix, one per row."""
    if not vectors:
        raise ShapeError("stack_rows of zero tensors")
    width = vectors[0].data.shape
    if any(v.data.ndim != 1 or v.data.shape != width for v in vectors):
        raise ShapeError("stack_rows: all inputs must be 1-D of equal length")
    data = np.stack([v.data for v in vectors], axis=0)
    return _wrap(data, tuple(vectors), lambda g: tuple(g[i] for i in range(len(vectors))))


def select_row(a: Tensor, i: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"select_row needs a 2-D tensor, got {a.data.shape}")
    if not 0 <= i < a.data.shape[0]:
        raise ShapeError(f"row index {i} out of range for {a.data.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[i] = g
        return (full,)

    return _wrap(a.data[i].copy(), (a,), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_rows needs a 2-D tensor, got {a.data.shape}")
    if not 0 <= start <= stop <= a.data.shape[0]:
        raise ShapeError(f"row slice [{start}:{stop}] out of range for {a.data.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _wrap(a.data[start:stop].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {a.data.shape}")
    if not 0 <= start <= stop <= a.data.shape[1]:
        raise ShapeError(f"col slice [{start}:{stop}] out of range for {a.data.shape}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _wrap(np.ascontiguousarray(a.data[:, start:stop]), (a,), bwd)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ids."""
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.data.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: ids must be a flat sequence")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather_rows: id out of range for table with {n} rows")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _wrap(table.data[idx], (table,), bwd)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _wrap(
            a.data.sum(dtype=a.data.dtype),
            (a,),
            lambda g: (np.full_like(a.data, g),),
        )
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"axis sum supports 2-D tensors, got {a.data.shape}")

    def bwd(g):
        if axis == 0:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(g[:, None], a.data.shape).copy(),)

    return _wrap(a.data.sum(axis=axis), (a,), bwd)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Nonlinearities and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction)."""
    xd = x.data
    if axis < 0:
        axis += xd.ndim
    if not 0 <= axis < xd.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {xd.shape}")
    if np.isnan(xd).any():
        raise NumericError("softmax input contains NaN")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _wrap(y, (x,), bwd)


def masked_softmax(scores: Tensor, additive_mask: np.ndarray) -> Tensor:
    """Softmax over visible positions only.

    ``additive_mask`` holds 0 where a key is visible and a large negative
    sentinel where it is not. The sentinel is added before the softmax and
    masked weights are zeroed and renormalised afterwards, so they come out
    exactly 0 and every row sums to 1 over its visible keys.
    """
    xd = scores.data
    if xd.ndim != 2:
        raise ShapeError(f"masked_softmax needs 2-D scores, got {xd.shape}")
    if additive_mask.shape != xd.shape:
        raise ShapeError(
            f"mask shape {additive_mask.shape} does not match scores {xd.shape}"
        )
    if np.isnan(xd).any():
        raise NumericError("masked_softmax input contains NaN")
    visible = additive_mask > -1e8
    if not visible.any(axis=1).all():
        raise ShapeError("masked_softmax: some row has no visible key")
    z = xd + additive_mask.astype(xd.dtype)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    e *= visible
    y = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _wrap(y, (scores,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalisation with population variance, then affine scale/shift."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError(f"layer_norm needs a 2-D input, got {xd.shape}")
    d = xd.shape[1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta must be ({d},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    mu = xd.mean(axis=1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = (xd - mu) * inv
    y = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        dx = inv * (
            gg
            - gg.mean(axis=1, keepdims=True)
            - xhat * (gg * xhat).mean(axis=1, keepdims=True)
        )
        return (dx.astype(xd.dtype), (g * xhat).sum(axis=0), g.sum(axis=0))

    return _wrap(y.astype(xd.dtype), (x, gamma, beta), bwd)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Negative log softmax probability of ``target``; gradient is
    softmax(logits) - one_hot(target)."""
    ld = logits.data
    if ld.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {ld.shape}")
    n = ld.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"cross_entropy: target {target} outside [0, {n})")
    m = ld.max()
    e = np.exp(ld - m)
    z = e.sum()
    loss = np.asarray(np.log(z) + m - ld[target], dtype=ld.dtype)
    p = e / z

    def bwd(g):
        d = p.copy()
        d[target] -= 1.0
        return (d * g,)

    return _wrap(loss, (logits,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        dy = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du
        return ((g * dy).astype(xd.dtype),)

    return _wrap(y.astype(xd.dtype), (x,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _wrap(x.data * keep, (x,), lambda g: (g * keep,))
