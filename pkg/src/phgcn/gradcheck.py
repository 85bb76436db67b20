"""Central finite-difference checks for every differentiable piece of the stack.

Relative error of an analytic gradient ``a`` against its numeric estimate ``n``
is ``max|a - n| / max(max|a|, max|n|, 1e-12)``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .attention import (
    global_aggregate_exact,
    global_aggregate_lattice,
    HeadParams,
    structural_aggregate,
)
from .autograd import Tape, Tensor
from .graph import Graph, from_edges
from .model import Model, make_config
from .permutohedral import elevate, find_simplex, lattice_constants, lattice_filter_backward, \
    lattice_filter_forward

FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    max_abs_error: float = float("nan")

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def check_tensors(name: str, loss_fn: Callable[[], Tensor], params: list[Tensor],
                  tol: float, h: float = FD_STEP) -> CheckResult:
    """Compare tape gradients of ``loss_fn()`` with finite differences for all ``params``."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst, worst_abs = 0.0, 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        numeric = numeric_grad(lambda: loss_fn().item(), p.values, h)
        worst = max(worst, rel_error(analytic, numeric))
        worst_abs = max(worst_abs, float(np.max(np.abs(analytic - numeric))))
        p.grad = None
    return CheckResult(name, worst, tol, worst_abs)


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.1):
    """Scale the backward pass of one op by ``factor`` (fault injection for tests)."""
    original = ag.record

    def patched(name, inputs, values, vjp):
        if name == op:
            inner = vjp

            def vjp(g):
                return tuple(None if x is None else factor * x for x in inner(g))
        return original(name, inputs, values, vjp)

    ag.record = patched
    try:
        yield
    finally:
        ag.record = original


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def random_graph(rng: np.random.Generator, n: int, n_edges: int, n_features: int, n_classes: int = 3):
    src = rng.integers(n, size=n_edges)
    dst = rng.integers(n, size=n_edges)
    keep = src != dst
    labels = rng.integers(n_classes, size=n)
    return from_edges(n, src[keep], dst[keep], rng.normal(size=(n, n_features)), labels)


def simplex_margin(positions: np.ndarray, lam: float) -> float:
    """Smallest positive barycentric weight the lattice filter assigns to ``positions``.

    Finite differences are only meaningful when no point is closer than the
    step to a simplex face: crossing one changes the lattice key set and the
    filter output jumps. Points exactly on a vertex (weights 1 and 0) are fine.
    """
    c, _ = lattice_constants(positions.shape[1])
    w = find_simplex(elevate(positions - positions.min(axis=0), lam * c)).weights
    positive = w[w > 0]
    return float(positive.min()) if np.any(w < 1) else 1.0


def interior_positions(rng: np.random.Generator, n: int, d: int, lam: float,
                       spread: float = 0.3, margin: float = 1e-3, tries: int = 200) -> np.ndarray:
    """Random positions whose positive barycentric weights all exceed ``margin``."""
    for _ in range(tries):
        p = spread * rng.normal(size=(n, d))
        if simplex_margin(p, lam) > margin:
            return p
    raise RuntimeError("could not draw simplex-interior positions")


def model_margin(model: Model, graph: Graph) -> float:
    """:func:`simplex_margin` over every lattice-filtered head of ``model``."""
    margin = 1.0
    for li, layer in enumerate(model.config.layers):
        if layer.kind == "phgcn" and layer.global_mode == "lattice":
            for emb in model.embeddings(graph, li):
                margin = min(margin, simplex_margin(emb, layer.lam_global))
    return margin


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def op_checks(rng: np.random.Generator) -> list[CheckResult]:
    out = []
    a, b = _param(rng, 3, 4), _param(rng, 4, 2)
    w = rng.normal(size=(3, 2))
    out.append(check_tensors("matmul", lambda: (ag.matmul(a, b) * w).sum(), [a, b], 1e-5))
    x = _param(rng, 4, 5)
    wx = rng.normal(size=(4, 5))
    out.append(check_tensors("elu", lambda: (ag.elu(x) * wx).sum(), [x], 1e-5))
    out.append(check_tensors("leaky_relu", lambda: (ag.leaky_relu(x) * wx).sum(), [x], 1e-5))
    mask = rng.random((4, 5)) < 0.6
    mask[:, 0] = True
    out.append(check_tensors("softmax_rows", lambda: (ag.softmax_rows(x, mask) * wx).sum(), [x], 1e-5))
    labels = rng.integers(5, size=4)
    out.append(check_tensors("nll_loss", lambda: ag.nll_loss(x, labels, np.array([1, 0, 1, 1], bool)),
                             [x], 1e-5))
    y = _param(rng, 4, 2)
    wc = rng.normal(size=(4, 7))
    out.append(check_tensors("concat_cols", lambda: (ag.concat_cols(x, y) * wc).sum(), [x, y], 1e-5))
    den = Tensor(rng.uniform(1, 2, size=(4, 1)), requires_grad=True)
    out.append(check_tensors("div", lambda: ((x / den) * wx).sum(), [x, den], 1e-5))
    idx = np.array([0, 2, 2, 3, 1, 0])
    wg = rng.normal(size=(6, 5))
    out.append(check_tensors("gather_rows", lambda: (ag.gather_rows(x, idx) * wg).sum(), [x], 1e-5))
    out.append(check_tensors("row_norm", lambda: (ag.row_norm(x) * wx[:, 0]).sum(), [x], 1e-5))
    e = _param(rng, 6, 3)
    wd = rng.normal(size=(6, 6))
    out.append(check_tensors("pairwise_distances", lambda: (ag.pairwise_distances(e) * wd).sum(),
                             [e], 1e-5))
    indptr = np.array([0, 2, 3, 6])
    logits = _param(rng, 6)
    we = rng.normal(size=6)
    out.append(check_tensors("segment_softmax",
                             lambda: (ag.segment_softmax(logits, indptr) * we).sum(), [logits], 1e-5))
    indices = np.array([0, 1, 1, 0, 2, 3])
    vals, m = _param(rng, 6), _param(rng, 4, 3)
    ws = rng.normal(size=(3, 3))
    out.append(check_tensors("spmm", lambda: (ag.spmm(vals, indptr, indices, m) * ws).sum(),
                             [vals, m], 1e-5))
    return out


def lattice_checks(rng: np.random.Generator, n: int = 12, d: int = 4, channels: int = 3,
                   lam: float = 10.0) -> list[CheckResult]:
    """Feature gradients anywhere (1e-5); position gradients on simplex-interior points (1e-3)."""
    p = interior_positions(rng, n, d, lam)
    f = rng.normal(size=(n, channels))
    g = rng.normal(size=(n, channels))
    _, ctx = lattice_filter_forward(p, f, lam)
    grad_f, grad_p = lattice_filter_backward(ctx, g)

    def loss():
        return float(np.sum(g * lattice_filter_forward(p, f, lam)[0]))

    return [
        CheckResult("lattice_features", rel_error(grad_f, numeric_grad(loss, f)), 1e-5),
        CheckResult("lattice_positions", rel_error(grad_p, numeric_grad(loss, p)), 1e-3),
    ]


def aggregation_checks(rng: np.random.Generator, n: int = 10, f_in: int = 5, f_out: int = 3,
                       d: int = 4, margin: float = 1e-3, tries: int = 100) -> list[CheckResult]:
    """Both pathways w.r.t. ``W`` and ``phi`` on an instance redrawn until its lattice points are interior."""
    for _ in range(tries):
        graph = random_graph(rng, n, 3 * n, f_in)
        h = Tensor(graph.features)
        W = Tensor(0.3 * rng.normal(size=(f_out, f_in)), requires_grad=True)
        phi = Tensor(0.3 * rng.normal(size=(d, f_out)), requires_grad=True)
        head = HeadParams(W, phi, 1.0, 10.0)
        if simplex_margin(head.embed(head.project(h)).values, head.lam_global) > margin:
            break
    else:
        raise RuntimeError("could not draw a simplex-interior instance")
    wo = rng.normal(size=(n, f_out))

    def run(kind):
        proj = head.project(h)
        emb = head.embed(proj)
        if kind == "structural":
            out = structural_aggregate(graph, emb, proj, head.lam_struct)
        elif kind == "exact":
            out = global_aggregate_exact(emb, proj, head.lam_global)
        else:
            out = global_aggregate_lattice(emb, proj, head.lam_global)
        return (out * wo).sum()

    return [
        check_tensors("structural_aggregate", lambda: run("structural"), [W, phi], 1e-4),
        check_tensors("global_aggregate_exact", lambda: run("exact"), [W, phi], 1e-4),
        check_tensors("global_aggregate_lattice", lambda: run("lattice"), [W, phi], 1e-3),
    ]


def model_checks(rng: np.random.Generator, n: int = 30, f_in: int = 6, n_classes: int = 3,
                 hidden: int = 4, heads: int = 2, d: int = 4, seed: int = 0,
                 margin: float = 1e-3, tries: int = 100) -> list[CheckResult]:
    """2-layer PH-GCN on a random 30-node graph, every parameter tensor checked.

    The graph is redrawn until every lattice point of every head lies at least
    ``margin`` (in barycentric weight) inside its simplex.
    """
    cfg = make_config("phgcn", f_in, n_classes, hidden=hidden, heads=heads, embed_dim=d, seed=seed)
    model = Model(cfg)
    for _ in range(tries):
        graph = random_graph(rng, n, 2 * n, f_in, n_classes)
        if model_margin(model, graph) > margin:
            break
    else:
        raise RuntimeError("could not draw a simplex-interior instance")
    labels = graph.labels

    def loss():
        return ag.nll_loss(model(graph), labels)

    return [check_tensors(f"model:{name}", loss, [p], 1e-3) for name, p in model.params.items()]


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return op_checks(rng) + lattice_checks(rng) + aggregation_checks(rng) + model_checks(rng, seed=seed)
