"""Reverse-mode autodiff over dense 2-D float64 arrays.

Every value is a matrix (row vectors are 1xN, scalars are 1x1). Each
operation records a backward closure on its output; ``Tensor.backward``
walks the tape in reverse topological order and accumulates gradients
into every participating input. Graph recording is skipped entirely
when no input requires a gradient or inside a ``no_grad()`` block, so
evaluation-mode passes run at plain numpy speed.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from ..errors import DegenerateBatchError, DimensionError, LabelError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_matrix(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are 2-D, got array of ndim {arr.ndim}")
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense float64 matrix with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- shape ----------------------------------------------------------

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() requires a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    # -- gradient plumbing ----------------------------------------------

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape."""
        if self.data.shape != (1, 1):
            raise DimensionError(f"backward() requires a 1x1 scalar, got {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.accumulate(np.ones((1, 1)))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0)) if isinstance(other, Tensor) else add(self, -other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor/tensor division is not supported; use scalars")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Build an op output, recording the tape node only when needed."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


# -- primitive operations -------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with gradient accumulation into both operands."""
    if a.cols != b.rows:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} x {b.shape}"
        )
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _result(out, (a, b), backward)


def _broadcast_ok(x: Tensor, y: Tensor) -> bool:
    return x.shape == y.shape or (y.rows == 1 and y.cols == x.cols)


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; the second operand may be a scalar or a 1xN row."""
    if not isinstance(b, Tensor):
        s = float(b)
        out = a.data + s

        def backward_scalar(g: np.ndarray) -> None:
            a.accumulate(g)

        return _result(out, (a,), backward_scalar)

    if not (_broadcast_ok(a, b) or _broadcast_ok(b, a)):
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g, b.data.shape))

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a broadcastable 1xN row."""
    if not (_broadcast_ok(a, b) or _broadcast_ok(b, a)):
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g * a.data, b.data.shape))

    return _result(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * s

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * s)

    return _result(out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    out = np.ascontiguousarray(a.data.T)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g.T)

    return _result(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.array([[a.data.sum()]])

    def backward(g: np.ndarray) -> None:
        a.accumulate(np.full_like(a.data, g[0, 0]))

    return _result(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.array([[a.data.sum() / n]])

    def backward(g: np.ndarray) -> None:
        a.accumulate(np.full_like(a.data, g[0, 0] / n))

    return _result(out, (a,), backward)


def sum_rows(a: Tensor) -> Tensor:
    """Row sums as an Nx1 column."""
    out = a.data.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _result(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * out)

    return _result(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g / a.data)

    return _result(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * (2.0 * a.data))

    return _result(out, (a,), backward)


def sqrt0(a: Tensor) -> Tensor:
    """Square root whose gradient is defined as 0 where the input is 0."""
    out = np.sqrt(a.data)

    def backward(g: np.ndarray) -> None:
        safe = np.where(out > 0.0, out, 1.0)
        a.accumulate(np.where(out > 0.0, g / (2.0 * safe), 0.0))

    return _result(out, (a,), backward)


def leaky_relu(a: Tensor, alpha: float) -> Tensor:
    """max(x, alpha*x); the tie at 0 takes slope alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu: alpha must lie in (0, 1), got {alpha}")
    positive = a.data > 0.0
    out = np.where(positive, a.data, alpha * a.data)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * np.where(positive, 1.0, alpha))

    return _result(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * out * (1.0 - out))

    return _result(out, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the clamp is active."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * inside)

    return _result(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax, computed with max-subtraction for stability."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * out).sum(axis=1, keepdims=True)
        a.accumulate(out * (g - inner))

    return _result(out, (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise DimensionError("concat_cols: empty input")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise DimensionError("concat_cols: row counts disagree")
    widths = [p.cols for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def backward(g: np.ndarray) -> None:
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate(g[:, a:b])

    return _result(out, tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.cols):
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for width {a.cols}")
    out = np.ascontiguousarray(a.data[:, start:stop])

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        buf[:, start:stop] = g
        a.accumulate(buf)

    return _result(out, (a,), backward)


def take_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise DimensionError(f"take_rows: index out of range for {a.rows} rows")
    out = a.data[idx]

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a.accumulate(buf)

    return _result(out, (a,), backward)


def grad_reverse(a: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the gradient by -lam."""
    out = a.data.copy()

    def backward(g: np.ndarray) -> None:
        a.accumulate(g * (-lam))

    return _result(out, (a,), backward)


# -- composite operations ---------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class per row."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        offender = int(labels[np.argmax(bad)])
        raise LabelError(f"label {offender} outside [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    out = np.array([[-logp[np.arange(n), labels].mean()]])

    def backward(g: np.ndarray) -> None:
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits.accumulate(p * (g[0, 0] / n))

    return _result(out, (logits,), backward)


def euclidean_dist(a: Tensor, b: Tensor) -> Tensor:
    """L2 distance between two same-shape vectors; gradient 0 when equal."""
    if a.shape != b.shape:
        raise DimensionError(f"euclidean_dist: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = float(np.sqrt((diff * diff).sum()))
    out = np.array([[d]])

    def backward(g: np.ndarray) -> None:
        u = diff / d * g[0, 0] if d > 0.0 else np.zeros_like(diff)
        if a.requires_grad:
            a.accumulate(u)
        if b.requires_grad:
            b.accumulate(-u)

    return _result(out, (a, b), backward)


def class_distance_matrix(feats: Tensor, centers: np.ndarray) -> Tensor:
    """NxC matrix of L2 distances from each row to each fixed center.

    Centers are constants; the gradient flows into ``feats`` only and is
    defined as 0 for any exactly coincident (row, center) pair.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != feats.cols:
        raise DimensionError(
            f"class_distance_matrix: centers {centers.shape} vs features width {feats.cols}"
        )
    diff = feats.data[:, None, :] - centers[None, :, :]
    dist = np.sqrt(np.einsum("ncd,ncd->nc", diff, diff))

    def backward(g: np.ndarray) -> None:
        safe = np.where(dist > 0.0, dist, 1.0)
        coef = np.where(dist > 0.0, g / safe, 0.0)
        feats.accumulate(np.einsum("nc,ncd->nd", coef, diff))

    return _result(dist, (feats,), backward)


def batch_norm_train(
    x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Column-wise batch normalization using current batch statistics.

    Returns the normalized tensor plus the batch mean and (population)
    variance so the caller can update its running moments.
    """
    n = x.rows
    if n < 2:
        raise DegenerateBatchError(f"train-mode batch norm needs >= 2 rows, got {n}")
    mu = x.data.mean(axis=0, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = centered * istd
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=0, keepdims=True))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            dxhat = g * gamma.data
            term = n * dxhat - dxhat.sum(axis=0, keepdims=True)
            term -= xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
            x.accumulate(istd / n * term)

    return _result(out, (x, gamma, beta), backward), mu, var


def batch_norm_eval(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
) -> Tensor:
    """Normalization by stored running moments (a per-column affine map)."""
    istd = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * istd
    out = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=0, keepdims=True))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            x.accumulate(g * gamma.data * istd)

    return _result(out, (x, gamma, beta), backward)
