"""Tape-based reverse-mode autodiff over dense float64 numpy arrays.

Operations run eagerly. While a :class:`Tape` is active, every op whose inputs
require gradients appends a node (op name, inputs, output, vector-Jacobian
product) to it; :meth:`Tape.backward` walks those nodes once in reverse order.

>>> x = Tensor([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     y = (x * x).sum()
>>> tape.backward(y)
>>> x.grad
array([[2., 4.]])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []
_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle the post-op NaN/Inf check; returns the previous setting."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every grad-requiring tensor that ``loss`` depends on.

        Gradients accumulate into existing ``.grad`` slots, so zero them between
        steps (the optimizer does this).
        """
        if loss.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        produced = {id(node.output) for node in self.nodes}
        if id(loss) not in produced and not loss.requires_grad:
            raise ValueError("loss was not recorded on this tape")
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            _accumulate(node.output, g)
            grads = node.vjp(g)
            for t, gt in zip(node.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    prev = pending.get(id(t))
                    pending[id(t)] = gt if prev is None else prev + gt
                else:
                    _accumulate(t, gt)
        if id(loss) not in produced:
            _accumulate(loss, np.ones_like(loss.values))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def record(op: str, inputs: Sequence[Tensor], values: np.ndarray,
           vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``values`` as the output of ``op`` and log it on the active tape.

    ``vjp`` maps the output gradient to one gradient (or None) per input.
    Custom differentiable ops are built on this.
    """
    if _CHECK_FINITE and not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("add", (a, b), a.values + b.values,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("sub", (a, b), a.values - b.values,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record("mul", (a, b), a.values * b.values,
                  lambda g: (_unbroadcast(g * b.values, a.shape),
                             _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.values / b.values
    return record("div", (a, b), out,
                  lambda g: (_unbroadcast(g / b.values, a.shape),
                             _unbroadcast(-g * out / b.values, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)
    return record("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return record("log", (x,), np.log(x.values), lambda g: (g / x.values,))


def sum_(x: Tensor, axis=None) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=axis is not None)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return record("sum", (x,), out, vjp)


def mean(x: Tensor) -> Tensor:
    n = x.size
    return record("mean", (x,), np.asarray(x.values.mean()),
                  lambda g: (np.full(x.shape, float(g) / n),))


def elu(x: Tensor) -> Tensor:
    """``x`` for positive inputs, ``exp(x) - 1`` otherwise."""
    neg = np.expm1(np.minimum(x.values, 0.0))
    pos = x.values > 0
    out = np.where(pos, x.values, neg)
    return record("elu", (x,), out, lambda g: (g * np.where(pos, 1.0, neg + 1.0),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.values > 0
    out = np.where(pos, x.values, slope * x.values)
    return record("leaky_relu", (x,), out, lambda g: (g * np.where(pos, 1.0, slope),))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; raises ``ValueError`` when inner dimensions differ."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return record("matmul", (a, b), a.values @ b.values,
                  lambda g: (g @ b.values.T, a.values.T @ g))


def reshape(x: Tensor, shape) -> Tensor:
    return record("reshape", (x,), x.values.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    return record("transpose", (x,), x.values.T.copy(), lambda g: (g.T,))


def concat_cols(*tensors: Tensor) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    tensors = tuple(as_tensor(t) for t in tensors)
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.ndim != 2 for t in tensors):
        raise ValueError(f"concat_cols needs 2-D tensors with equal rows, got {[t.shape for t in tensors]}")
    edges = np.cumsum([0] + [t.shape[1] for t in tensors])

    def vjp(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:]))

    return record("concat_cols", tensors, np.concatenate([t.values for t in tensors], axis=1), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def vjp(g):
        full = np.zeros(x.shape)
        full[:, start:stop] = g
        return (full,)

    return record("slice_cols", (x,), x.values[:, start:stop].copy(), vjp)


def gather_rows(x: Tensor, index) -> Tensor:
    """``x[index]`` for an integer row index array."""
    index = np.asarray(index, dtype=np.int64)

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return record("gather_rows", (x,), x.values[index], vjp)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

DISTANCE_EPS = 1e-12


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row; gradient 0 for rows shorter than 1e-12."""
    n = np.sqrt(np.sum(x.values ** 2, axis=1))
    safe = np.where(n < DISTANCE_EPS, np.inf, n)
    return record("row_norm", (x,), n, lambda g: (x.values * (g / safe)[:, None],))


def pairwise_distances(x: Tensor) -> Tensor:
    """Dense ``(N, N)`` Euclidean distance matrix between rows of ``x``."""
    diff = x.values[:, None, :] - x.values[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    safe = np.where(dist < DISTANCE_EPS, np.inf, dist)

    def vjp(g):
        w = g / safe
        w = w + w.T
        return (w.sum(axis=1)[:, None] * x.values - w @ x.values,)

    return record("pairwise_distances", (x,), dist, vjp)


# ---------------------------------------------------------------------------
# Attention and losses
# ---------------------------------------------------------------------------

def softmax_rows(logits: Tensor, mask=None) -> Tensor:
    """Row-wise softmax; entries where ``mask`` is False come out exactly 0.

    Uses max subtraction, so large equal logits are fine. A row with no
    unmasked entry raises ``ValueError``.
    """
    z = logits.values
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} != logits shape {z.shape}")
        if not np.all(mask.any(axis=1)):
            raise ValueError("softmax_rows: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return record("softmax_rows", (logits,), p, vjp)


def segment_softmax(logits: Tensor, indptr) -> Tensor:
    """Softmax of a flat edge vector within each CSR row segment."""
    indptr = np.asarray(indptr, dtype=np.int64)
    counts = np.diff(indptr)
    if np.any(counts == 0):
        raise ValueError("segment_softmax: empty segment (node without neighbors)")
    z = logits.values
    starts = indptr[:-1]
    seg_max = np.maximum.reduceat(z, starts)
    e = np.exp(z - np.repeat(seg_max, counts))
    p = e / np.repeat(np.add.reduceat(e, starts), counts)

    def vjp(g):
        dot = np.add.reduceat(g * p, starts)
        return (p * (g - np.repeat(dot, counts)),)

    return record("segment_softmax", (logits,), p, vjp)


def spmm(values: Tensor, indptr, indices, x: Tensor) -> Tensor:
    """Sparse-dense product ``A @ x`` with ``A`` given in CSR form by ``values``."""
    import scipy.sparse as sp

    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    n = len(indptr) - 1
    A = sp.csr_matrix((values.values, indices, indptr), shape=(n, x.shape[0]))
    rows = np.repeat(np.arange(n), np.diff(indptr))

    def vjp(g):
        g_vals = np.einsum("ef,ef->e", g[rows], x.values[indices]) if values.requires_grad else None
        g_x = np.asarray(A.T @ g) if x.requires_grad else None
        return (g_vals, g_x)

    return record("spmm", (values, x), np.asarray(A @ x.values), vjp)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p``, survivors scaled by ``1/(1-p)``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return record("dropout", (x,), x.values * keep, lambda g: (g * keep,))


def log_softmax_rows(logits: Tensor) -> Tensor:
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return record("log_softmax_rows", (logits,), out,
                  lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def nll_loss(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean cross-entropy of ``logits`` against integer ``labels`` over ``mask``.

    Parameters
    ----------
    logits : Tensor, shape (m, C)
        Raw class scores; normalized internally with a stable log-softmax.
    labels : int array, shape (m,)
    mask : bool array, shape (m,), optional
        Rows entering the mean (all rows if omitted).
    """
    labels = np.asarray(labels, dtype=np.int64)
    m, c = logits.shape
    mask = np.ones(m, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("nll_loss: empty mask")
    if np.any((labels[idx] < 0) | (labels[idx] >= c)):
        raise ValueError(f"nll_loss: labels must lie in [0, {c})")
    logp = log_softmax_rows(logits).values
    picked = logp[idx, labels[idx]]
    p = np.exp(logp[idx])

    def vjp(g):
        full = np.zeros((m, c))
        full[idx] = p
        full[idx, labels[idx]] -= 1.0
        return (full * (float(g) / idx.size),)

    return record("nll_loss", (logits,), np.asarray(-picked.mean()), vjp)
