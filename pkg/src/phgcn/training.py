"""Training loops: full-batch transductive node classification and the inductive motif task."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .graph import Graph, MotifSpec, gen_motif_chain, split_nodes
from .model import Model, ModelConfig, make_config
from .optim import Adam


@dataclass
class MetricsRecord:
    """One row of the metrics stream.

    ``test_acc`` is the test accuracy of the parameters with the lowest
    validation loss seen so far, so the final row carries the reported number.
    """

    iteration: int
    train_loss: float
    val_loss: float
    val_acc: float
    test_acc: float
    wall_ms: float


METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRecord))


def write_metrics(records: Iterable[MetricsRecord], path_or_buffer) -> None:
    """CSV with a header row; floats written with ``repr`` so reruns compare byte-for-byte."""
    own = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([r.iteration] + [repr(float(getattr(r, c))) for c in METRICS_COLUMNS[1:]])
    finally:
        if own:
            fh.close()


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["iteration"]), *(float(r[c]) for c in METRICS_COLUMNS[1:])) for r in rows]


def metrics_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    write_metrics(records, buf)
    return buf.getvalue()


def accuracy(logits: np.ndarray, labels: np.ndarray, mask) -> float:
    idx = np.flatnonzero(mask)
    return float(np.mean(np.argmax(logits[idx], axis=1) == labels[idx]))


def _check_loss(loss: Tensor, iteration: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"loss diverged at iteration {iteration}: {value}")
    return value


def _clock(deterministic: bool) -> Callable[[], float]:
    # wall-clock time is the only nondeterministic column; pin it in deterministic mode
    if deterministic:
        return lambda: 0.0
    start = time.perf_counter()
    return lambda: (time.perf_counter() - start) * 1e3


# ---------------------------------------------------------------------------
# Transductive
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    records: list[MetricsRecord]
    best_iteration: int
    best_val_loss: float
    test_acc: float
    best_params: dict[str, np.ndarray]
    model: Model

    def summary(self) -> dict:
        return {"best_iteration": self.best_iteration, "best_val_loss": self.best_val_loss,
                "test_acc": self.test_acc, "iterations": len(self.records)}


def train_transductive(config: ModelConfig, graph: Graph, masks=None, *, lr: float = 0.005,
                       weight_decay: float = 5e-4, max_iters: int = 1000, patience: int = 100,
                       seed: int = 0, deterministic: bool = False,
                       on_record: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    """Full-batch training with early stopping on validation loss.

    Parameters
    ----------
    masks : (train, val, test) boolean arrays, optional
        Defaults to the graph's stored masks and then to a 60/20/20 stratified split by ``seed``.
    patience : int
        Stop after this many iterations without a new best validation loss.

    Returns
    -------
    TrainResult
        ``test_acc`` is measured with the parameters of the lowest-validation-loss
        iterate, which are restored into ``model`` before returning.
    """
    if lr < 0 or not np.isfinite(lr):
        raise ValueError(f"lr must be finite and >= 0, got {lr}")
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if masks is None:
        stored = (graph.train_mask, graph.val_mask, graph.test_mask)
        masks = stored if all(m is not None for m in stored) else split_nodes(graph, seed)
    train, val, test = (np.asarray(m, dtype=bool) for m in masks)
    labels = graph.labels
    model = Model(config)
    opt = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    clock = _clock(deterministic)

    records: list[MetricsRecord] = []
    best = (np.inf, -1, float("nan"))
    best_params = {k: p.values.copy() for k, p in model.params.items()}
    since_best = 0
    for it in range(max_iters):
        with Tape() as tape:
            logits = model(graph, training=True, rng=rng)
            loss = ag.nll_loss(logits, labels, train)
        train_loss = _check_loss(loss, it)
        tape.backward(loss)
        opt.step()

        # evaluate the updated parameters without dropout
        eval_logits = model(graph)
        val_loss = ag.nll_loss(eval_logits, labels, val).item()
        if val_loss < best[0]:
            best = (val_loss, it, accuracy(eval_logits.values, labels, test))
            best_params = {k: p.values.copy() for k, p in model.params.items()}
            since_best = 0
        else:
            since_best += 1
        rec = MetricsRecord(it, train_loss, val_loss, accuracy(eval_logits.values, labels, val),
                            best[2], clock())
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        if since_best >= patience:
            break

    for k, p in model.params.items():
        p.values = best_params[k].copy()
    return TrainResult(records, best[1], float(best[0]), float(best[2]), best_params, model)


# ---------------------------------------------------------------------------
# Motif chains
# ---------------------------------------------------------------------------

@dataclass
class MotifSettings:
    """Inductive motif-chain experiment settings."""

    kind: str = "phgcn"
    iterations: int = 3000
    chain_length: int = 10
    eval_every: int = 100
    eval_graphs: int = 100
    hidden: int = 8
    heads: int = 2
    n_layers: int = 3
    lr: float = 0.005
    weight_decay: float = 0.0
    embed_init: float = 0.1
    lam_struct: float = 1.0
    lam_global: float = 3.0
    embed_dim: int = 4
    global_mode: str = "lattice"
    spec: MotifSpec = field(default_factory=MotifSpec)

    def model_config(self, seed: int) -> ModelConfig:
        return make_config(self.kind, len(self.spec.roles), 2, hidden=self.hidden, heads=self.heads,
                           n_layers=self.n_layers, embed_dim=self.embed_dim,
                           lam_struct=self.lam_struct, lam_global=self.lam_global,
                           global_mode=self.global_mode, seed=seed, embed_init=self.embed_init)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("spec")
        return d


def balanced_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of the per-class cross-entropies over labeled nodes (labels < 0 ignored)."""
    parts = [ag.nll_loss(logits, labels, labels == c) for c in (0, 1) if np.any(labels == c)]
    if not parts:
        raise ValueError("graph has no labeled nodes")
    return parts[0] if len(parts) == 1 else (parts[0] + parts[1]) * 0.5


def motif_eval_set(spec: MotifSpec, n_graphs: int, length: int, rng: np.random.Generator):
    """``n_graphs`` chains, each with one red node of each label picked uniformly.

    Chains lacking one of the labels are redrawn, so chance accuracy is exactly 0.5.
    """
    out = []
    while len(out) < n_graphs:
        g = gen_motif_chain(spec, length, rng)
        pos, neg = np.flatnonzero(g.labels == 1), np.flatnonzero(g.labels == 0)
        if pos.size and neg.size:
            out.append((g, np.array([rng.choice(pos), rng.choice(neg)])))
    return out


def evaluate_motif(model: Model, eval_set) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) over the selected nodes of ``eval_set``."""
    losses, hits = [], []
    for g, nodes in eval_set:
        logits = model(g)
        mask = np.zeros(g.n, dtype=bool)
        mask[nodes] = True
        losses.append(ag.nll_loss(logits, g.labels, mask).item())
        hits.extend(np.argmax(logits.values[nodes], axis=1) == g.labels[nodes])
    return float(np.mean(losses)), float(np.mean(hits))


def train_motif(settings: MotifSettings, seed: int = 0, *, deterministic: bool = False,
                on_record: Callable[[MetricsRecord], None] | None = None) -> list[MetricsRecord]:
    """Train on a fresh chain every iteration; evaluate every ``eval_every`` iterations.

    The evaluation set is drawn once per run from its own stream, and both the
    ``val_*`` and ``test_acc`` columns report it. Iteration 0 is the untrained model.
    """
    model = Model(settings.model_config(seed))
    opt = Adam(model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay)
    train_rng, eval_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    eval_set = motif_eval_set(settings.spec, settings.eval_graphs, settings.chain_length, eval_rng)
    clock = _clock(deterministic)

    records = []
    window: list[float] = []
    for it in range(settings.iterations + 1):
        if it % settings.eval_every == 0:
            val_loss, acc = evaluate_motif(model, eval_set)
            rec = MetricsRecord(it, float(np.mean(window)) if window else float("nan"),
                                val_loss, acc, acc, clock())
            records.append(rec)
            window = []
            if on_record is not None:
                on_record(rec)
        if it == settings.iterations:
            break
        g = gen_motif_chain(settings.spec, settings.chain_length, train_rng)
        with Tape() as tape:
            loss = balanced_loss(model(g, training=True, rng=train_rng), g.labels)
        window.append(_check_loss(loss, it))
        tape.backward(loss)
        opt.step()
    return records
