"""Timing of lattice-filtered vs exact global aggregation, and embedding dumps."""

from __future__ import annotations

import csv
import os
import time
from pathlib import Path

import numpy as np

from .attention import exact_global_numpy, lattice_global_numpy
from .graph import Graph
from .model import Model

BENCH_COLUMNS = ("size", "lattice_ms", "exact_ms", "threads")


def _best_ms(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1e3


def bench_instance(n: int, d: int, channels: int, rng: np.random.Generator):
    """Gaussian point cloud (unit spread, like trained embeddings) with normal features."""
    return rng.normal(size=(n, d)), rng.normal(size=(n, channels))


def bench_global(sizes, *, d: int = 4, channels: int = 8, lam: float = 10.0, seed: int = 0,
                 repeats: int = 3, exact: bool = True, threads: int | None = None) -> list[dict]:
    """Best-of-``repeats`` wall time (ms) of both global pathways per size.

    Parameters
    ----------
    sizes : ascending ints
    exact : bool
        Skip the quadratic path (reported as NaN) when False.
    threads : int, optional
        Echoed into the table; defaults to ``PHGCN_THREADS`` or 1.
    """
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes) or any(s < 1 for s in sizes):
        raise ValueError(f"sizes must be positive and ascending, got {sizes}")
    threads = threads or int(os.environ.get("PHGCN_THREADS", "1"))
    rng = np.random.default_rng(seed)
    lattice_global_numpy(*bench_instance(64, d, channels, rng), lam)  # compile the hash kernels
    rows = []
    for n in sizes:
        p, f = bench_instance(n, d, channels, rng)
        lat = _best_ms(lambda: lattice_global_numpy(p, f, lam), repeats)
        ex = _best_ms(lambda: exact_global_numpy(p, f, lam), repeats) if exact else float("nan")
        rows.append({"size": n, "lattice_ms": lat, "exact_ms": ex, "threads": threads})
    return rows


def write_bench(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.3f}" if k.endswith("_ms") else r[k]) for k in BENCH_COLUMNS})


def dump_embeddings(model: Model, graph: Graph, out_dir, *, layer: int = 0) -> list[Path]:
    """One CSV per head of ``layer``: ``node_id, label, x0 .. x{D-1}``."""
    first = model.config.layers[0]
    if graph.n_features != first.in_dim:
        raise ValueError(f"checkpoint expects {first.in_dim} input features, graph has {graph.n_features}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = graph.node_ids or [str(i) for i in range(graph.n)]
    paths = []
    for a, emb in enumerate(model.embeddings(graph, layer)):
        path = out_dir / f"embeddings_layer{layer}_head{a}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "label"] + [f"x{k}" for k in range(emb.shape[1])])
            for i in range(graph.n):
                w.writerow([ids[i], int(graph.labels[i])] + [repr(float(v)) for v in emb[i]])
        paths.append(path)
    return paths


def read_embeddings(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(node ids, labels, coordinates) from a dump written by :func:`dump_embeddings`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = [r[0] for r in rows]
    labels = np.array([int(r[1]) for r in rows])
    coords = np.array([[float(v) for v in r[2:]] for r in rows])
    return ids, labels, coords
