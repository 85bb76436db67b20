"""Permutohedral-lattice approximation of exponential-decay non-local filtering.

Given N points ``p_i`` in R^D with feature rows ``f_i``, the filter approximates

    out_i = sum_j exp(-lam * ||p_i - p_j||) f_j

in O(N) time. Points are lifted onto the hyperplane ``sum(x) = 0`` of R^(D+1),
splatted onto the vertices of their enclosing lattice simplex, blurred along the
D+1 lattice axes with a 7-tap kernel and sliced back with the same barycentric
weights. The implicit weight matrix is ``S B S^T`` with ``S`` the (N x M)
barycentric splat matrix and ``B`` the blur, so it is symmetric and nonnegative.

Lattice vertices are stored as D+1 integer coordinates that are all congruent
modulo D+1 and sum to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
import scipy.sparse as sp
from numba import njit

KERNEL_WIDTH = 7
_HALF = KERNEL_WIDTH // 2
_HASH_MASK = (1 << 40) - 1


# ---------------------------------------------------------------------------
# Elevation and simplex search
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def elevation_matrix(d: int) -> np.ndarray:
    """Isometric embedding of R^d into the hyperplane ``1^T x = 0`` of R^(d+1).

    Column ``j`` is ``s_j * (1, ..., 1, -(j+1), 0, ..., 0)`` with ``j+1`` leading
    ones and ``s_j = 1/sqrt((j+1)(j+2))``: the cumulative-difference form of the
    canonical permutohedral lift, normalized so Euclidean distances are kept.
    """
    if d < 1:
        raise ValueError(f"lattice dimension must be >= 1, got {d}")
    E = np.zeros((d + 1, d))
    for j in range(d):
        s = 1.0 / np.sqrt((j + 1) * (j + 2))
        E[: j + 1, j] = s
        E[j + 1, j] = -(j + 1) * s
    E.setflags(write=False)
    return E


def elevate(positions, scale: float) -> np.ndarray:
    """Lift ``(N, D)`` positions (or a single ``(D,)`` point) onto the lattice plane.

    The map is linear and multiplies distances by ``scale``.
    """
    p = np.asarray(positions, dtype=np.float64)
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    if not np.all(np.isfinite(p)):
        raise ValueError("positions must be finite")
    single = p.ndim == 1
    p2 = np.atleast_2d(p)
    out = scale * (p2 @ elevation_matrix(p2.shape[1]).T)
    return out[0] if single else out


@lru_cache(maxsize=None)
def _canonical(d: int) -> np.ndarray:
    d1 = d + 1
    c = np.empty((d1, d1), dtype=np.int64)
    for k in range(d1):
        c[k, : d1 - k] = k
        c[k, d1 - k:] = k - d1
    return c


@dataclass
class SimplexEmbedding:
    """Enclosing-simplex data for a batch of elevated points.

    Attributes
    ----------
    elevated : (N, D+1) float array
    keys : (N, D+1, D+1) int array
        ``keys[i, k]`` is the vertex of point ``i`` with remainder ``k``.
    weights : (N, D+1) float array
        Barycentric weights matching ``keys``; nonnegative, rows sum to one.
    rank : (N, D+1) int array
        Rank of each coordinate's rounding residual (0 = largest). Fixes the
        simplex and therefore the linear map from ``elevated`` to ``weights``.
    """

    elevated: np.ndarray
    keys: np.ndarray
    weights: np.ndarray
    rank: np.ndarray

    @property
    def dim(self) -> int:
        return self.elevated.shape[1] - 1

    def __len__(self) -> int:
        return self.elevated.shape[0]

    def weight_vjp(self, grad_weights: np.ndarray) -> np.ndarray:
        """Pull a gradient on ``weights`` back to ``elevated`` with the simplex held fixed."""
        d = self.dim
        d1 = d + 1
        g = np.asarray(grad_weights, dtype=np.float64)
        up = np.take_along_axis(g, d - self.rank, axis=1)
        down = np.take_along_axis(g, (d1 - self.rank) % d1, axis=1)
        return (up - down) / d1


def find_simplex(elevated) -> SimplexEmbedding:
    """Locate the enclosing lattice simplex and barycentric weights of each point.

    Accepts ``(N, D+1)`` or a single ``(D+1,)`` point (returned as a batch of one).
    Coordinates are rounded to the nearest multiple of D+1, the zero-sum
    constraint is repaired by moving the coordinates with the largest rounding
    error, and the residual ranking selects the simplex vertices.
    """
    x = np.atleast_2d(np.asarray(elevated, dtype=np.float64))
    n, d1 = x.shape
    d = d1 - 1
    if d < 1:
        raise ValueError("elevated points need at least 2 coordinates")
    if not np.all(np.isfinite(x)):
        raise ValueError("elevated coordinates must be finite")

    v = x / d1
    up = np.ceil(v) * d1
    down = np.floor(v) * d1
    rem0 = np.where(up - x < x - down, up, down)
    excess = np.rint(rem0.sum(axis=1) / d1).astype(np.int64)

    # rank 0 = largest residual; ties go to the lower coordinate index
    order = np.argsort(-(x - rem0), axis=1, kind="stable")
    rank = np.empty((n, d1), dtype=np.int64)
    np.put_along_axis(rank, order, np.arange(d1)[None, :], axis=1)

    ex = excess[:, None]
    pos = ex > 0
    neg = ex < 0
    lower = pos & (rank >= d1 - ex)
    raise_ = neg & (rank < -ex)
    rem0 = rem0 - d1 * lower + d1 * raise_
    rank = rank + ex - d1 * lower + d1 * raise_

    y = (x - rem0) / d1
    bary = np.zeros((n, d1 + 1))
    rows = np.arange(n)[:, None]
    bary[rows, d - rank] += y
    bary[rows, d1 - rank] -= y
    bary[:, 0] += 1.0 + bary[:, d1]
    # points on a face can pick up -1e-16 from round-off
    weights = np.maximum(bary[:, :d1], 0.0)

    base = rem0.astype(np.int64)
    keys = base[:, None, :] + _canonical(d)[:, rank].transpose(1, 0, 2)
    return SimplexEmbedding(elevated=x, keys=keys, weights=weights, rank=rank)


# ---------------------------------------------------------------------------
# Hash table
# ---------------------------------------------------------------------------

@njit(cache=True)
def _hash(key, d):
    h = 0
    for i in range(d):
        h = ((h + key[i]) * 2531011) & _HASH_MASK
    return h


@njit(cache=True)
def _same(a, b, d):
    for i in range(d):
        if a[i] != b[i]:
            return False
    return True


@njit(cache=True)
def _insert(queries, valid, slots, entries, n_entries):
    d = queries.shape[1] - 1
    mask = slots.shape[0] - 1
    out = np.empty(queries.shape[0], dtype=np.int64)
    n = n_entries
    for q in range(queries.shape[0]):
        if not valid[q]:
            out[q] = -1
            continue
        h = _hash(queries[q], d) & mask
        while True:
            e = slots[h]
            if e < 0:
                entries[n, :] = queries[q]
                slots[h] = n
                out[q] = n
                n += 1
                break
            if _same(entries[e], queries[q], d):
                out[q] = e
                break
            h = (h + 1) & mask
    return out, n


@njit(cache=True)
def _lookup(queries, slots, entries):
    d = queries.shape[1] - 1
    mask = slots.shape[0] - 1
    out = np.empty(queries.shape[0], dtype=np.int64)
    for q in range(queries.shape[0]):
        h = _hash(queries[q], d) & mask
        while True:
            e = slots[h]
            if e < 0:
                out[q] = -1
                break
            if _same(entries[e], queries[q], d):
                out[q] = e
                break
            h = (h + 1) & mask
    return out


def _capacity(n_keys: int) -> int:
    return 1 << max(4, int(np.ceil(np.log2(max(2 * n_keys, 1)))))


class _LatticeIndex:
    """Open-addressing map from lattice keys to dense row numbers (insertion order).

    Only the first D coordinates are hashed and compared; the last one is fixed
    by the zero-sum constraint.
    """

    def __init__(self, d: int, max_keys: int):
        self.d = d
        self.slots = np.full(_capacity(max_keys), -1, dtype=np.int64)
        self._entries = np.empty((max(max_keys, 1), d + 1), dtype=np.int64)
        self.size = 0
        self._neighbors: np.ndarray | None = None

    @property
    def keys(self) -> np.ndarray:
        return self._entries[: self.size]

    def insert(self, keys: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        if valid is None:
            valid = np.ones(len(keys), dtype=np.bool_)
        need = self.size + int(valid.sum())
        if need > len(self._entries):
            grown = np.empty((need, self.d + 1), dtype=np.int64)
            grown[: self.size] = self.keys
            self._entries = grown
        if 2 * need > len(self.slots):
            self._rehash(_capacity(need))
        idx, self.size = _insert(keys, valid, self.slots, self._entries, self.size)
        self._neighbors = None
        return idx

    def _rehash(self, capacity: int) -> None:
        keys = self.keys.copy()
        self.slots = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        _insert(keys, np.ones(len(keys), dtype=np.bool_), self.slots, self._entries, 0)
        self.size = len(keys)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        return _lookup(keys, self.slots, self._entries)

    def neighbors(self) -> np.ndarray:
        """``(D+1, HALF, 2, M)`` rows of the +k / -k neighbors per axis; missing -> M."""
        if self._neighbors is None:
            d1 = self.d + 1
            m = self.size
            keys = self.keys
            nbr = np.empty((d1, _HALF, 2, m), dtype=np.int64)
            for axis in range(d1):
                step = np.full(d1, -1, dtype=np.int64)
                step[axis] = self.d
                for k in range(1, _HALF + 1):
                    for s, sign in enumerate((1, -1)):
                        found = self.lookup(keys + sign * k * step)
                        found[found < 0] = m
                        nbr[axis, k - 1, s] = found
            self._neighbors = nbr
        return self._neighbors


class LatticeTable:
    """Sparse lattice state: value vectors attached to the vertices touched by splatting.

    Tables derived from one another by ``blur`` share the key index, so
    ``values`` rows line up across them.
    """

    def __init__(self, index: _LatticeIndex, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != index.size:
            raise ValueError(
                f"values must have shape ({index.size}, C), got {values.shape}"
            )
        self._index = index
        self.values = values

    @classmethod
    def from_keys(cls, keys, channels: int) -> "LatticeTable":
        """Zero-valued table holding the given ``(M, D+1)`` keys (duplicates merged)."""
        keys = np.atleast_2d(np.asarray(keys, dtype=np.int64))
        index = _LatticeIndex(keys.shape[1] - 1, len(keys))
        index.insert(keys)
        return cls(index, np.zeros((index.size, channels)))

    @property
    def keys(self) -> np.ndarray:
        return self._index.keys

    @property
    def dim(self) -> int:
        return self._index.d

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self._index.size

    def lookup(self, keys) -> np.ndarray:
        """Row numbers for ``(Q, D+1)`` keys, -1 where absent."""
        return self._index.lookup(np.atleast_2d(keys))

    def get(self, key) -> np.ndarray:
        row = int(self.lookup(np.asarray(key)[None, :])[0])
        if row < 0:
            return np.zeros(self.channels)
        return self.values[row]

    def with_values(self, values) -> "LatticeTable":
        return LatticeTable(self._index, values)

    def inner(self, other: "LatticeTable") -> float:
        if other._index is not self._index:
            raise ValueError("tables must share a key index")
        return float(np.sum(self.values * other.values))


# ---------------------------------------------------------------------------
# Splat / blur / slice
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlurKernel:
    """Taps for lattice offsets -3..3 along one axis."""

    taps: np.ndarray = field(repr=False)
    decay: float | None = None

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.shape != (KERNEL_WIDTH,):
            raise ValueError(f"kernel needs {KERNEL_WIDTH} taps, got shape {taps.shape}")
        if not np.allclose(taps, taps[::-1], rtol=0, atol=0):
            raise ValueError("kernel taps must be symmetric")
        if np.any(taps < 0):
            raise ValueError("kernel taps must be nonnegative")
        object.__setattr__(self, "taps", taps)

    @classmethod
    def exponential(cls, decay: float) -> "BlurKernel":
        """``w_k = exp(-|k| * decay)``; unnormalized, ``w_0 = 1``."""
        if not decay > 0:
            raise ValueError("decay must be positive")
        k = np.arange(-_HALF, _HALF + 1)
        return cls(np.exp(-np.abs(k) * decay), decay)

    @classmethod
    def identity(cls) -> "BlurKernel":
        taps = np.zeros(KERNEL_WIDTH)
        taps[_HALF] = 1.0
        return cls(taps)


def build_table(embedding: SimplexEmbedding, channels: int) -> tuple[LatticeTable, np.ndarray]:
    """Register every vertex with positive weight; returns the empty table and ``(N, D+1)`` rows.

    Zero-weight vertices are left out (row -1) so that a point sitting exactly
    on a vertex touches only that vertex.
    """
    n, d1 = embedding.weights.shape
    index = _LatticeIndex(d1 - 1, n * d1)
    valid = (embedding.weights > 0).ravel()
    rows = index.insert(embedding.keys.reshape(n * d1, d1), valid).reshape(n, d1)
    return LatticeTable(index, np.zeros((index.size, channels))), rows


def splat_matrix(embedding: SimplexEmbedding, rows: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Sparse ``(N, M)`` matrix of barycentric weights."""
    keep = rows >= 0
    counts = keep.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return sp.csr_matrix(
        (embedding.weights[keep], rows[keep], indptr), shape=(len(rows), n_vertices)
    )


def splat(embedding: SimplexEmbedding, features) -> LatticeTable:
    """Accumulate each point's feature row onto its simplex vertices, scaled by its weights."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[0] != len(embedding):
        raise ValueError(f"{len(embedding)} points but {f.shape[0]} feature rows")
    table, rows = build_table(embedding, f.shape[1])
    S = splat_matrix(embedding, rows, len(table))
    return table.with_values(np.asarray(S.T @ f))


def blur_axis(table: LatticeTable, axis: int, kernel: BlurKernel) -> LatticeTable:
    """One 7-tap pass along lattice axis ``axis``; absent neighbors read as zero."""
    nbr = table._index.neighbors()[axis]
    values = table.values
    taps = kernel.taps
    padded = np.vstack([values, np.zeros((1, values.shape[1]))])
    out = taps[_HALF] * values
    for k in range(1, _HALF + 1):
        out = out + taps[_HALF + k] * padded[nbr[k - 1, 0]] + taps[_HALF - k] * padded[nbr[k - 1, 1]]
    return table.with_values(out)


def blur(table: LatticeTable, kernel: BlurKernel, order: str = "symmetric") -> LatticeTable:
    """Separable blur over all D+1 axes.

    Passes only reach vertices already in the table, so passes along different
    axes do not commute. ``"ascending"`` and ``"descending"`` sweeps are each
    other's adjoints; ``"symmetric"`` (default) averages the two, which makes
    the operator self-adjoint.
    """
    d1 = table.dim + 1
    if order == "ascending":
        axes = range(d1)
    elif order == "descending":
        axes = range(d1 - 1, -1, -1)
    elif order == "symmetric":
        a = blur(table, kernel, "ascending")
        b = blur(table, kernel, "descending")
        return table.with_values(0.5 * (a.values + b.values))
    else:
        raise ValueError(f"unknown blur order {order!r}")
    for axis in axes:
        table = blur_axis(table, axis, kernel)
    return table


def slice_table(table: LatticeTable, embedding: SimplexEmbedding) -> np.ndarray:
    """Barycentric read-out ``out_i = sum_k w_ik * table[vertex_ik]``; absent vertices give zero."""
    if table.dim != embedding.dim:
        raise ValueError(f"table is {table.dim}-D but points are {embedding.dim}-D")
    rows = table.lookup(embedding.keys.reshape(-1, table.dim + 1)).reshape(embedding.weights.shape)
    rows = np.where(embedding.weights > 0, rows, -1)
    S = splat_matrix(embedding, rows, len(table))
    return np.asarray(S @ table.values)


# ---------------------------------------------------------------------------
# Full filter
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1)
def _calibration() -> dict:
    with resources.files("phgcn.data").joinpath("lattice_calibration.json").open() as fh:
        return json.load(fh)


def lattice_constants(d: int) -> tuple[float, float]:
    """Calibrated ``(c_D, kappa)``: elevation scale per unit decay and blur-tap decay."""
    cal = _calibration()
    try:
        c = cal["scale_per_decay"][str(d)]
    except KeyError:
        raise ValueError(f"no lattice calibration recorded for D={d}") from None
    return float(c), float(cal["kappa"])


@dataclass
class FilterContext:
    """What the backward pass needs from a forward call."""

    scale: float
    kernel: BlurKernel
    origin_rows: np.ndarray
    embedding: SimplexEmbedding
    rows: np.ndarray
    table: LatticeTable
    splat: sp.csr_matrix
    features: np.ndarray
    blurred: np.ndarray


def _apply(S: sp.csr_matrix, table: LatticeTable, kernel: BlurKernel, f: np.ndarray):
    lattice = table.with_values(np.asarray(S.T @ f))
    blurred = blur(lattice, kernel).values
    return np.asarray(S @ blurred), blurred


def lattice_filter_forward(positions, features, lam: float, *, scale: float | None = None,
                           kernel: BlurKernel | None = None):
    """Approximate ``sum_j exp(-lam ||p_i - p_j||) f_j`` for every point.

    Parameters
    ----------
    positions : (N, D) array
    features : (N, C) array
    lam : float
        Decay rate of the target kernel.
    scale, kernel : optional
        Override the calibrated elevation scale (``lam * c_D``) and blur taps.

    Returns
    -------
    out : (N, C) array
    ctx : FilterContext
        Input to :func:`lattice_filter_backward`.

    Positions are measured from their coordinate-wise minimum before lifting,
    which makes the result independent of global translations and puts
    coincident points exactly on a lattice vertex.
    """
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if p.shape[0] < 1:
        raise ValueError("need at least one point")
    if f.shape[0] != p.shape[0]:
        raise ValueError(f"{p.shape[0]} positions but {f.shape[0]} feature rows")
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(f))):
        raise ValueError("positions and features must be finite")
    d = p.shape[1]
    if scale is None or kernel is None:
        c, kappa = lattice_constants(d)
        scale = lam * c if scale is None else scale
        kernel = BlurKernel.exponential(kappa) if kernel is None else kernel

    origin_rows = np.argmin(p, axis=0)
    origin = p[origin_rows, np.arange(d)]
    emb = find_simplex(elevate(p - origin, scale))
    table, rows = build_table(emb, f.shape[1])
    S = splat_matrix(emb, rows, len(table))
    out, blurred = _apply(S, table, kernel, f)
    ctx = FilterContext(scale, kernel, origin_rows, emb, rows, table, S, f, blurred)
    return out, ctx


def lattice_filter_backward(ctx: FilterContext | None, grad_out):
    """Gradients of ``<grad_out, out>`` w.r.t. features and positions.

    The feature gradient is the forward pipeline applied to ``grad_out`` (the
    operator is self-adjoint). Position gradients differentiate the barycentric
    weights at both the splat and slice sites with each point's simplex held
    fixed.
    """
    if ctx is None:
        raise ValueError("lattice_filter_backward needs the context saved by the forward pass")
    g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
    if g.shape != ctx.features.shape:
        raise ValueError(f"grad_out shape {g.shape} != output shape {ctx.features.shape}")
    S = ctx.splat
    grad_features, blurred_grad = _apply(S, ctx.table, ctx.kernel, g)

    emb = ctx.embedding
    rows = ctx.rows
    d1 = rows.shape[1]
    Y = np.vstack([ctx.blurred, np.zeros((1, ctx.blurred.shape[1]))])
    Z = np.vstack([blurred_grad, np.zeros((1, blurred_grad.shape[1]))])
    safe = np.where(rows >= 0, rows, len(ctx.table))
    grad_w = np.einsum("ic,ikc->ik", g, Y[safe]) + np.einsum("ic,ikc->ik", ctx.features, Z[safe])

    grad_x = emb.weight_vjp(grad_w)
    d = d1 - 1
    grad_centered = ctx.scale * (grad_x @ elevation_matrix(d))
    grad_positions = grad_centered.copy()
    np.subtract.at(grad_positions, (ctx.origin_rows, np.arange(d)), grad_centered.sum(axis=0))
    return grad_features, grad_positions
