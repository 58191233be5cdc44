"""Reverse-mode automatic differentiation over float64 numpy arrays.

The graph is recorded eagerly: every operation touching at least one
``requires_grad`` tensor stores a closure that routes the output gradient
back to its inputs. ``backward`` replays the closures in reverse
topological order. Gradients accumulate into leaf tensors across calls
until ``zero_grads`` clears them.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeMismatchError",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "relu",
    "softmax",
    "layer_norm",
    "reduce_sum",
    "reduce_mean",
    "slice_rows",
    "slice_cols",
    "concat",
    "embedding",
    "dropout",
    "mse_loss",
    "cross_entropy_sum",
    "cross_entropy_loss",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    """Dense float64 array that can participate in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_backward_fn", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward_fn = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    grad_parents = tuple(p for p in parents if p.requires_grad)
    if grad_parents:
        out.requires_grad = True
        out._parents = grad_parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate grad buffers of every requires_grad leaf reachable from loss.

    Leaf gradients accumulate across calls; intermediate node gradients are
    reset at the start of each call so that a replayed graph contributes
    exactly once per call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not loss._parents:
        # The loss is itself a leaf parameter.
        _accumulate(loss, np.ones_like(loss.data))
        return

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# Elementwise and structural operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bw)


def neg(a) -> Tensor:
    a = _coerce(a)

    def bw(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), bw)


def scale(a, c: float) -> Tensor:
    a = _coerce(a)
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(
            f"matmul expects rank-2 operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a rank-2 tensor, got {a.data.shape}")

    def bw(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), bw)


def relu(a) -> Tensor:
    a = _coerce(a)
    keep = a.data > 0

    def bw(g):
        _accumulate(a, g * keep)

    return _make(np.where(keep, a.data, 0.0), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    a = _coerce(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeMismatchError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        # ds = s * (g - sum(g * s))
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(a, s * (g - inner))

    return _make(s, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gamma.data * xhat + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead) if lead else g * xhat)
        _accumulate(beta, g.sum(axis=lead) if lead else g)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dxhat - m1 - xhat * m2))

    return _make(data, (x, gamma, beta), bw)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) == 0 else np.full_like(a.data, g))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _coerce(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)

    return _make(a.data[start:stop].copy(), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _coerce(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _make(a.data[:, start:stop].copy(), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accumulate(p, g[tuple(idx)])
            offset += n

    return _make(data, parts, bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; backward scatter-adds."""
    table = _coerce(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatchError(f"embedding ids must be rank-1, got shape {idx.shape}")
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding id out of range [0, {v}): {idx.min()}..{idx.max()}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _make(table.data[idx].copy(), (table,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted-scaling dropout; identity when rate is 0 or rng is absent."""
    if rate <= 0.0 or rng is None:
        return x
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared elementwise difference."""
    pred, target = _coerce(pred), _coerce(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(
            f"mse_loss shapes differ: {pred.data.shape} vs {target.data.shape}"
        )
    diff = pred.data - target.data
    n = diff.size
    data = np.asarray((diff * diff).sum() / n)

    def bw(g):
        d = (2.0 / n) * diff * g
        _accumulate(pred, d)
        _accumulate(target, -d)

    return _make(data, (pred, target), bw)


def cross_entropy_sum(logits: Tensor, target_ids, pad_id: int) -> tuple[Tensor, int]:
    """Summed negative log-softmax probability over non-pad positions.

    Returns the summed loss tensor and the count of non-pad positions so
    that callers can pool token-level means across several sequences.
    """
    logits = _coerce(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy expects [T x V] logits, got {logits.data.shape}")
    idx = np.asarray(target_ids, dtype=np.int64)
    if idx.ndim != 1 or idx.shape[0] != logits.data.shape[0]:
        raise ShapeMismatchError(
            f"target length {idx.shape} does not match logits rows {logits.data.shape}"
        )
    v = logits.data.shape[1]
    real = idx != pad_id
    if real.any():
        bad = idx[real]
        if bad.min() < 0 or bad.max() >= v:
            raise IndexError(f"target id out of range [0, {v})")
    count = int(real.sum())
    if count == 0:
        return Tensor(0.0), 0

    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1)
    probs = e / z[:, None]
    log_p = (logits.data[np.arange(idx.size), idx] - m[:, 0]) - np.log(z)
    data = np.asarray(-log_p[real].sum())

    def bw(g):
        full = np.zeros_like(logits.data)
        full[real] = probs[real]
        full[np.flatnonzero(real), idx[real]] -= 1.0
        _accumulate(logits, full * g)

    return _make(data, (logits,), bw), count


def cross_entropy_loss(logits: Tensor, target_ids, pad_id: int) -> Tensor:
    """Mean negative log-likelihood over non-pad targets; 0 when all-pad."""
    total, count = cross_entropy_sum(logits, target_ids, pad_id)
    if count == 0:
        return total
    return scale(total, 1.0 / count)
