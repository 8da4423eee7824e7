"""Dense float64 tensors with reverse-mode automatic differentiation.

Every kernel runs eagerly on a C-contiguous float64 numpy buffer and, when
gradients are enabled, records a node holding its inputs and a backward
closure. ``backward(loss)`` walks the recorded graph once in reverse
topological order, accumulates gradients (so shared inputs add up within a
step) and then clears the graph; touching a consumed graph again raises
instead of silently accumulating across steps.

Shape rules are strict: elementwise kernels demand identical shapes,
``matmul`` accepts 2-D operands, equal-leading-dim batched operands, or an
N-D left with a 2-D right. There is no broadcasting beyond
``add_broadcast`` (trailing-shape operand), which is what the encoders
need. All kernels verify their outputs are finite and raise NumericError
otherwise.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class _Node:
    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A dense float64 array, optionally part of the current backward graph.

    ``data`` is always C-contiguous (row-major flat buffer); ``grad`` is
    populated by ``backward`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        _require_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._op: Optional[_Node] = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, what: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        for t in inputs:
            if t._consumed:
                raise UsageError(
                    f"{what}: input belongs to a graph already consumed by backward(); "
                    "rebuild the forward pass for a new step"
                )
        out.requires_grad = True
        out._op = _Node(tuple(inputs), backward)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural kernels
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learned scalar tensor."""
    if s.data.size != 1:
        raise DimensionError(f"scale_by: scale must be scalar, got shape {s.shape}")
    sv = float(s.data.reshape(()))
    return _result(x.data * sv, (x, s),
                   lambda g: (g * sv, np.asarray((g * x.data).sum()).reshape(s.shape)),
                   "scale_by")


def add_broadcast(x: Tensor, p: Tensor) -> Tensor:
    """x + p where p's shape equals the trailing shape of x (bias, positions)."""
    if p.ndim >= x.ndim or x.shape[x.ndim - p.ndim:] != p.shape:
        raise DimensionError(
            f"add_broadcast: {p.shape} is not a trailing shape of {x.shape}")
    lead = tuple(range(x.ndim - p.ndim))
    return _result(x.data + p.data, (x, p),
                   lambda g: (g, g.sum(axis=lead)), "add_broadcast")


def broadcast_rows(v: Tensor, leading_shape: tuple) -> Tensor:
    """Tile v across new leading axes; gradient sums back over them."""
    lead = tuple(int(n) for n in leading_shape)
    out = np.broadcast_to(v.data, lead + v.shape).copy()
    axes = tuple(range(len(lead)))
    return _result(out, (v,), lambda g: (g.sum(axis=axes),), "broadcast_rows")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    orig = x.shape
    return _result(x.data.reshape(shape).copy(), (x,),
                   lambda g: (g.reshape(orig),), "reshape")


def transpose(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(int(i) for i in np.argsort(axes))
    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inv)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise UsageError("concat: need at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, offsets, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis),
                   tuple(tensors), backward, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _result(x.data[idx].copy(), (x,), backward, "slice")


def take_rows(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along axis 0; repeated indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise UsageError(f"take_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise UsageError(f"take_rows: index out of range for axis of length {x.shape[0]}")

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx].copy(), (x,), backward, "take_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids of any shape S produce an S+(d,) output."""
    if table.ndim != 2:
        raise DimensionError(f"embedding: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError(f"embedding: id out of range for table of {table.shape[0]} rows")
    flat = ids.ravel()
    d = table.shape[1]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, flat, g.reshape(-1, d))
        return (full,)

    return _result(table.data[flat].reshape(ids.shape + (d,)), (table,),
                   backward, "embedding")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")

    if ad.ndim == bd.ndim:
        if ad.shape[:-2] != bd.shape[:-2]:
            raise DimensionError(f"matmul: leading dimensions disagree for {a.shape} and {b.shape}")

        def backward(g):
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            return (ga, gb)

    elif bd.ndim == 2:
        k, n = bd.shape

        def backward(g):
            ga = np.matmul(g, bd.T)
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return (ga, gb)

    else:
        raise DimensionError(f"matmul: unsupported operand ranks {a.shape} and {b.shape}")

    return _result(np.matmul(ad, bd), (a, b), backward, "matmul")


def pairwise_distances(f: Tensor) -> Tensor:
    """Euclidean distance matrix of the rows of a B×d feature matrix.

    The diagonal is exactly zero; gradients at coincident points are taken
    as zero (subgradient of the norm at the origin).
    """
    if f.ndim != 2:
        raise DimensionError(f"pairwise_distances: need a 2-D matrix, got {f.shape}")
    fd = f.data
    gram = fd @ fd.T
    sq = np.diag(gram)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
    dist = np.sqrt(d2)
    np.fill_diagonal(dist, 0.0)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(dist > 0.0, g / np.where(dist > 0.0, dist, 1.0), 0.0)
        w = coef + coef.T
        return (w.sum(axis=1)[:, None] * fd - w @ fd,)

    return _result(dist, (f,), backward, "pairwise_distances")


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    if eps <= 0:
        raise UsageError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def backward(g):
        gy = g * gain.data
        # d/dx of (x-mu)/sigma: remove the mean components along the row
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - y * (gy * y).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (gx, (g * y).sum(axis=lead), g.sum(axis=lead))

    return _result(y * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(inner)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner),)

    return _result(0.5 * xd * (1.0 + t), (x,), backward, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def _scalar(g) -> float:
    return float(np.asarray(g).reshape(()))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    """Mean pooling along one axis."""
    n = x.shape[axis]
    return _result(x.data.mean(axis=axis), (x,),
                   lambda g: (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),),
                   "mean_axis")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(x.shape, _scalar(g) / n),), "mean_all")


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, _scalar(g)),), "sum_all")


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target, averaged over all elements."""
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t
    n = diff.size
    return _result(np.asarray((diff ** 2).mean()), (pred,),
                   lambda g: (2.0 * _scalar(g) / n * diff,), "mse")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of B×N logits against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.intp)
    b, n = logits.shape
    if lab.shape != (b,):
        raise DimensionError(f"cross_entropy: labels shape {lab.shape} does not match batch {b}")
    if lab.size and (lab.min() < 0 or lab.max() >= n):
        bad = lab[(lab < 0) | (lab >= n)][0]
        raise UsageError(f"cross_entropy: label {bad} outside [0, {n})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    losses = lse - shifted[rows, lab]

    def backward(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, lab] -= 1.0
        return (_scalar(g) / b * p,)

    return _result(np.asarray(losses.mean()), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Populate gradients of everything the scalar ``loss`` depends on.

    Gradients are fresh per call: shared use within the graph accumulates,
    state from previous steps never does. The graph is cleared afterwards;
    a second backward over it raises. Tensors passed via ``params`` that
    the loss does not reach get a zero gradient buffer.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward: this graph was already consumed; run a fresh forward pass")

    # iterative DFS topological sort (graphs can exceed the recursion limit)
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._op is not None:
            for parent in node._op.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(topo):
        op = node._op
        if op is None:
            continue
        grads = op.backward(node.grad)
        for parent, g in zip(op.inputs, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g
        node._op = None
        node._consumed = True

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
