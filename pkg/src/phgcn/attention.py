"""Euclidean-distance attention with structural and global aggregation pathways.

Every node ``i`` gets an embedding ``p_i = Phi W h_i`` and attends to node ``j``
with logit ``-lam * ||p_i - p_j||``. The structural pathway normalizes these
logits over graph neighbors; the global pathway normalizes over all nodes,
either exactly in O(N^2) or through the permutohedral lattice in O(N) by
filtering ``[W h_j, 1]`` and dividing by the filtered constant channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from . import autograd as ag
from .autograd import Tensor
from .graph import Graph
from .permutohedral import lattice_filter_backward, lattice_filter_forward

HOMOGENEOUS_EPS = 1e-12

Activation = Callable[[Tensor], Tensor] | None


@dataclass
class HeadParams:
    """One attention head: projection ``W`` (F' x F) and embedding ``phi`` (D x F')."""

    W: Tensor
    phi: Tensor
    lam_struct: float = 1.0
    lam_global: float = 10.0

    def __post_init__(self):
        if not (self.lam_struct > 0 and self.lam_global > 0):
            raise ValueError("attention decay rates must be positive")
        if self.phi.shape[1] != self.W.shape[0]:
            raise ValueError(f"phi {self.phi.shape} does not match W {self.W.shape}")

    @property
    def embed_dim(self) -> int:
        return self.phi.shape[0]

    def project(self, h: Tensor) -> Tensor:
        """Row-wise ``W h_i`` -> (N, F')."""
        return ag.matmul(h, ag.transpose(self.W))

    def embed(self, projected: Tensor) -> Tensor:
        """Row-wise ``Phi W h_i`` -> (N, D)."""
        return ag.matmul(projected, ag.transpose(self.phi))


def _activate(x: Tensor, activation: Activation) -> Tensor:
    return x if activation is None else activation(x)


def euclidean_logits(emb: Tensor, src, dst, lam: float) -> Tensor:
    """``-lam * ||emb[dst] - emb[src]||`` for each pair; flat (E,) tensor."""
    diff = ag.gather_rows(emb, dst) - ag.gather_rows(emb, src)
    return ag.row_norm(diff) * (-lam)


def structural_attention(graph: Graph, emb: Tensor, lam: float) -> Tensor:
    """Softmax of Euclidean logits over each node's CSR neighborhood (E,)."""
    if np.any(np.diff(graph.indptr) == 0):
        raise ValueError("structural attention needs a self-loop on every node")
    logits = euclidean_logits(emb, graph.indices, graph.edge_rows(), lam)
    return ag.segment_softmax(logits, graph.indptr)


def structural_aggregate(graph: Graph, emb: Tensor, projected: Tensor, lam: float, *,
                         activation: Activation = ag.elu, attn_dropout: float = 0.0,
                         training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Attention-weighted average of neighbors' projected features, then ``activation``."""
    alpha = structural_attention(graph, emb, lam)
    alpha = ag.dropout(alpha, attn_dropout, training, rng)
    out = ag.spmm(alpha, graph.indptr, graph.indices, projected)
    return _activate(out, activation)


def global_aggregate_exact(emb: Tensor, projected: Tensor, lam: float, *,
                           activation: Activation = ag.elu) -> Tensor:
    """O(N^2) global attention: softmax of ``-lam * dist`` over all nodes."""
    logits = ag.pairwise_distances(emb) * (-lam)
    alpha = ag.softmax_rows(logits)
    return _activate(ag.matmul(alpha, projected), activation)


def lattice_filter(positions: Tensor, features: Tensor, lam: float, **kw) -> Tensor:
    """Differentiable permutohedral filter ``~ sum_j exp(-lam ||p_i - p_j||) f_j``."""
    out, ctx = lattice_filter_forward(positions.values, features.values, lam, **kw)

    def vjp(g):
        grad_f, grad_p = lattice_filter_backward(ctx, g)
        return grad_p, grad_f

    return ag.record("lattice_filter", (positions, features), out, vjp)


def global_aggregate_lattice(emb: Tensor, projected: Tensor, lam: float, *,
                             activation: Activation = ag.elu, **lattice_kw) -> Tensor:
    """O(N) global attention via one lattice filtering of ``[projected, 1]``.

    Raises ``FloatingPointError`` if a filtered normalizer drops below 1e-12,
    which points at a mis-scaled lattice rather than a real attention pattern.
    """
    n, f = projected.shape
    ones = Tensor(np.ones((n, 1)))
    filtered = lattice_filter(emb, ag.concat_cols(projected, ones), lam, **lattice_kw)
    denom = ag.slice_cols(filtered, f, f + 1)
    if np.any(denom.values < HOMOGENEOUS_EPS):
        raise FloatingPointError("lattice normalizer below 1e-12; check lam/scale")
    out = ag.slice_cols(filtered, 0, f) / denom
    return _activate(out, activation)


def exact_global_numpy(positions: np.ndarray, features: np.ndarray, lam: float,
                       chunk: int = 1024) -> np.ndarray:
    """Normalized exact global aggregation without a tape, chunked to bound memory."""
    p = np.asarray(positions, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    out = np.empty_like(f)
    for lo in range(0, len(p), chunk):
        logits = -lam * cdist(p[lo:lo + chunk], p)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        out[lo:lo + chunk] = (w @ f) / w.sum(axis=1, keepdims=True)
    return out


def lattice_global_numpy(positions: np.ndarray, features: np.ndarray, lam: float, **kw) -> np.ndarray:
    """Normalized lattice global aggregation without a tape."""
    f = np.asarray(features, dtype=np.float64)
    aug = np.hstack([f, np.ones((len(f), 1))])
    out, _ = lattice_filter_forward(positions, aug, lam, **kw)
    return out[:, :-1] / out[:, -1:]
