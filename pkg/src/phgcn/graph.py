"""Graphs in CSR form, TSV ingestion, stratified splits and the motif-chain task.

File formats (tab separated, ``#`` comments and blank lines ignored):

* nodes file: ``id <TAB> label <TAB> x_1 ... x_F`` with label ``-1`` for unlabeled
* edges file: ``src <TAB> dst`` using ids from the nodes file
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Graph:
    """Node-attributed graph with a sorted, duplicate-free CSR adjacency.

    Row ``i`` of the adjacency lists the neighbors ``j`` that node ``i``
    aggregates from; every node has a self-loop.
    """

    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray | None = None
    val_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    node_ids: list[str] | None = None
    raw_edge_count: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_edges(self) -> int:
        return len(self.indices)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        labeled = self.labels[self.labels >= 0]
        return int(labeled.max()) + 1 if labeled.size else 0

    def edge_rows(self) -> np.ndarray:
        """Row (destination) index of each CSR entry."""
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def dense_adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n), dtype=bool)
        A[self.edge_rows(), self.indices] = True
        return A

    def validate(self) -> None:
        n = self.n
        if self.features.shape[0] != n or self.labels.shape != (n,):
            raise ValueError("features/labels do not match node count")
        rows = self.edge_rows()
        if np.any(self.indices < 0) or np.any(self.indices >= n):
            raise ValueError("edge endpoint out of range")
        order = rows * n + self.indices
        if np.any(np.diff(order) <= 0):
            raise ValueError("CSR rows must be sorted and duplicate-free")
        if not np.all(np.isin(np.arange(n) * n + np.arange(n), order)):
            raise ValueError("every node needs a self-loop")
        masks = [m for m in (self.train_mask, self.val_mask, self.test_mask) if m is not None]
        if masks and np.any(np.sum(masks, axis=0) > 1):
            raise ValueError("train/val/test masks overlap")


def from_edges(n: int, src, dst, features, labels, *, symmetrize: bool = True, **kw) -> Graph:
    """Build a :class:`Graph`, adding self-loops and dropping duplicate edges.

    An edge ``(u, v)`` lets ``v`` aggregate from ``u``; with ``symmetrize`` the
    reverse direction is added too.
    """
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    loops = np.arange(n, dtype=np.int64)
    rows = [dst, loops]
    cols = [src, loops]
    if symmetrize:
        rows.append(src)
        cols.append(dst)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    code = np.unique(rows * n + cols)
    rows, cols = np.divmod(code, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    g = Graph(
        indptr=np.cumsum(indptr),
        indices=cols,
        features=np.asarray(features, dtype=np.float64).reshape(n, -1),
        labels=np.asarray(labels, dtype=np.int64),
        raw_edge_count=len(src),
        **kw,
    )
    g.validate()
    return g


def _data_lines(path: Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if text and not text.startswith("#"):
                yield lineno, text.split("\t") if "\t" in text else text.split()


def load_graph(nodes_path, edges_path, *, symmetrize: bool = True) -> Graph:
    """Read a graph from the nodes/edges TSV pair.

    Raises ``ValueError`` naming the file and line for malformed rows,
    inconsistent feature widths, duplicate node ids and dangling edge endpoints.
    """
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    ids: dict[str, int] = {}
    labels: list[int] = []
    rows: list[list[float]] = []
    width = None
    for lineno, parts in _data_lines(nodes_path):
        where = f"{nodes_path}:{lineno}"
        if len(parts) < 2:
            raise ValueError(f"{where}: expected id, label and features")
        if parts[0] in ids:
            raise ValueError(f"{where}: duplicate node id {parts[0]!r}")
        try:
            label = int(parts[1])
            feats = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise ValueError(f"{where}: {exc}") from None
        if width is None:
            width = len(feats)
        elif len(feats) != width:
            raise ValueError(f"{where}: expected {width} features, got {len(feats)}")
        ids[parts[0]] = len(ids)
        labels.append(label)
        rows.append(feats)
    n = len(ids)
    if n == 0:
        raise ValueError(f"{nodes_path}: no nodes")

    src, dst = [], []
    for lineno, parts in _data_lines(edges_path):
        where = f"{edges_path}:{lineno}"
        if len(parts) != 2:
            raise ValueError(f"{where}: expected 'src<TAB>dst'")
        try:
            u, v = ids[parts[0]], ids[parts[1]]
        except KeyError as exc:
            raise ValueError(f"{where}: unknown node id {exc.args[0]!r}") from None
        src.append(u)
        dst.append(v)

    features = np.array(rows, dtype=np.float64).reshape(n, width or 0)
    return from_edges(n, src, dst, features, labels, symmetrize=symmetrize, node_ids=list(ids))


def save_graph(graph: Graph, nodes_path, edges_path) -> None:
    """Write ``graph`` in the TSV format; self-loops are implied and not written."""
    ids = graph.node_ids or [str(i) for i in range(graph.n)]
    with open(nodes_path, "w") as fh:
        for i in range(graph.n):
            feats = "\t".join(repr(float(v)) for v in graph.features[i])
            fh.write(f"{ids[i]}\t{int(graph.labels[i])}" + (f"\t{feats}" if feats else "") + "\n")
    rows = graph.edge_rows()
    with open(edges_path, "w") as fh:
        for r, c in zip(rows, graph.indices):
            if r != c:
                fh.write(f"{ids[c]}\t{ids[r]}\n")


def split_nodes(graph: Graph, seed: int, fractions=(0.6, 0.2, 0.2)):
    """Random per-class train/val/test masks (60/20/20 by default).

    Each class of ``n`` labeled nodes gets ``floor(0.2 n)`` validation and test
    nodes; training takes the rest. Classes with fewer than 5 nodes raise.
    """
    rng = np.random.default_rng(seed)
    n = graph.n
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for c in np.unique(graph.labels[graph.labels >= 0]):
        members = np.flatnonzero(graph.labels == c)
        if len(members) < 5:
            raise ValueError(f"class {c} has {len(members)} labeled nodes; need at least 5")
        members = rng.permutation(members)
        n_val = int(np.floor(fractions[1] * len(members)))
        n_test = int(np.floor(fractions[2] * len(members)))
        val[members[:n_val]] = True
        test[members[n_val:n_val + n_test]] = True
        train[members[n_val + n_test:]] = True
    return train, val, test


# ---------------------------------------------------------------------------
# Motif-chain task
# ---------------------------------------------------------------------------

MOTIF_1, MOTIF_2, SPACER = 0, 1, 2
ROLES = ("r", "a", "b", "s")


@dataclass(frozen=True)
class MotifSpec:
    """Element topologies for the motif-chain task.

    Each element is ``(roles, edges, port)``: node roles, undirected internal
    edges and the node that bridges to the neighboring elements. Red nodes
    (role ``"r"``) are the classified ones.
    """

    motif_1: tuple = (("r", "a", "a"), ((0, 1), (1, 2), (2, 0)), 1)
    motif_2: tuple = (("r", "b", "b", "b"), ((0, 1), (1, 2), (2, 3), (3, 0)), 1)
    spacer: tuple = (("s",), (), 0)
    roles: tuple = ROLES

    def element(self, kind: int):
        return (self.motif_1, self.motif_2, self.spacer)[kind]

    def feature(self, role: str) -> np.ndarray:
        v = np.zeros(len(self.roles))
        v[self.roles.index(role)] = 1.0
        return v


def build_motif_chain(spec: MotifSpec, elements) -> Graph:
    """Chain the given element kinds and label red nodes by motif dominance.

    Red nodes get label 1 when their motif occurs strictly more often than the
    other motif, else 0; all other nodes are unlabeled (-1). ``meta`` records
    the element kinds, each node's element kind and the motif counts.
    """
    roles, kinds, src, dst = [], [], [], []
    prev_port = None
    for kind in elements:
        e_roles, e_edges, port = spec.element(kind)
        base = len(roles)
        roles.extend(e_roles)
        kinds.extend([kind] * len(e_roles))
        for u, v in e_edges:
            src.append(base + u)
            dst.append(base + v)
        if prev_port is not None:
            src.append(prev_port)
            dst.append(base + port)
        prev_port = base + port
    counts = Counter(elements)
    c1, c2 = counts.get(MOTIF_1, 0), counts.get(MOTIF_2, 0)
    kinds = np.array(kinds)
    red = np.array([r == "r" for r in roles])
    labels = np.full(len(roles), -1, dtype=np.int64)
    labels[red & (kinds == MOTIF_1)] = int(c1 > c2)
    labels[red & (kinds == MOTIF_2)] = int(c2 > c1)
    features = np.stack([spec.feature(r) for r in roles])
    meta = {"elements": list(elements), "kinds": kinds, "counts": (c1, c2)}
    return from_edges(len(roles), src, dst, features, labels, meta=meta)


def gen_motif_chain(spec: MotifSpec, length: int, rng: np.random.Generator,
                    max_attempts: int = 1000) -> Graph:
    """Sample a chain of ``length`` elements uniformly from motif_1, motif_2 and spacer.

    Draws with equal motif counts (no dominant motif) are rejected and redrawn.
    """
    if length < 2:
        raise ValueError("chain length must be >= 2")
    for _ in range(max_attempts):
        elements = [int(k) for k in rng.integers(0, 3, size=length)]
        if elements.count(MOTIF_1) != elements.count(MOTIF_2):
            return build_motif_chain(spec, elements)
    raise RuntimeError(f"no untied motif chain in {max_attempts} draws")
