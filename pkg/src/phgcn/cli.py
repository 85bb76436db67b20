"""Command-line entry point: ``phgcn {train,motif,gradcheck,bench,dump-embeddings}``.

Every subcommand takes ``--config PATH`` (JSON); command-line flags override
config keys. Internal parallelism is capped by ``PHGCN_THREADS`` (default 1).

train config::

    {"data": {"nodes": "cora.nodes.tsv", "edges": "cora.edges.tsv", "symmetrize": true},
     "model": {"kind": "phgcn", "hidden": 8, "heads": 8, "n_layers": 2, "embed_dim": 4,
               "lam_struct": 1.0, "lam_global": 10.0, "dropout": 0.6, "attn_dropout": 0.6,
               "global_mode": "lattice", "embed_init": 1.0},
     "lr": 0.005, "weight_decay": 5e-4, "max_iters": 1000, "patience": 100,
     "seed": 0, "out": "runs/cora", "deterministic": false}

motif config: any field of :class:`phgcn.training.MotifSettings` plus
``seed``, ``out`` and ``deterministic``.
"""

from __future__ import annotations

import os

# must run before numpy loads its BLAS
_THREADS = os.environ.get("PHGCN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from dataclasses import fields  # noqa: E402
from pathlib import Path  # noqa: E402

from . import gradcheck as gc  # noqa: E402
from .bench import bench_global, dump_embeddings, write_bench  # noqa: E402
from .graph import load_graph  # noqa: E402
from .model import load_model, make_config, save_model  # noqa: E402
from .training import MotifSettings, train_motif, train_transductive, write_metrics  # noqa: E402

TRAIN_DEFAULTS = {
    "model": {"kind": "phgcn", "hidden": 8, "heads": 8, "n_layers": 2, "embed_dim": 4,
              "lam_struct": 1.0, "lam_global": 10.0, "dropout": 0.6, "attn_dropout": 0.6,
              "global_mode": "lattice", "embed_init": 1.0},
    "lr": 0.005, "weight_decay": 5e-4, "max_iters": 1000, "patience": 100,
    "seed": 0, "out": "runs/train", "deterministic": False,
}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SystemExit(f"{path}: invalid JSON ({exc})")
    if not isinstance(cfg, dict):
        raise SystemExit(f"{path}: top level must be an object")
    return cfg


def _merge(defaults: dict, cfg: dict, args: argparse.Namespace, keys) -> dict:
    out = json.loads(json.dumps(defaults))
    for k, v in cfg.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    for k in keys:
        v = getattr(args, k, None)
        if v is not None and v is not False:
            out[k] = v
    return out


def cmd_train(args) -> int:
    cfg = _merge(TRAIN_DEFAULTS, _load_config(args.config), args,
                 ("seed", "out", "deterministic", "lr", "max_iters", "patience"))
    data = dict(cfg.get("data", {}))
    if args.nodes:
        data["nodes"], data["edges"] = args.nodes, args.edges
    if "nodes" not in data or "edges" not in data:
        raise SystemExit("train: need data.nodes and data.edges (config or --nodes/--edges)")
    graph = load_graph(data["nodes"], data["edges"], symmetrize=data.get("symmetrize", True))
    model_cfg = make_config(in_dim=graph.n_features, n_classes=graph.n_classes, seed=cfg["seed"],
                            **cfg["model"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    result = train_transductive(model_cfg, graph, lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                                max_iters=cfg["max_iters"], patience=cfg["patience"],
                                seed=cfg["seed"], deterministic=cfg["deterministic"])
    write_metrics(result.records, out / "metrics.csv")
    save_model(result.model, out)
    (out / "train_config.json").write_text(json.dumps(cfg, indent=2) + "\n")
    summary = result.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_motif(args) -> int:
    names = {f.name for f in fields(MotifSettings)} - {"spec"}
    defaults = {**MotifSettings().to_dict(), "seed": 0, "out": "runs/motif", "deterministic": False}
    cfg = _merge(defaults, _load_config(args.config), args,
                 ("seed", "out", "deterministic", "kind", "iterations"))
    unknown = set(cfg) - names - {"seed", "out", "deterministic"}
    if unknown:
        raise SystemExit(f"motif: unknown config keys {sorted(unknown)}")
    settings = MotifSettings(**{k: cfg[k] for k in names})
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    def show(r):
        print(f"iter {r.iteration:5d}  eval_acc {r.val_acc:.3f}  eval_loss {r.val_loss:.4f}", flush=True)

    records = train_motif(settings, cfg["seed"], deterministic=cfg["deterministic"], on_record=show)
    write_metrics(records, out / "metrics.csv")
    summary = {"kind": settings.kind, "seed": cfg["seed"], "final_acc": records[-1].val_acc,
               "max_acc": max(r.val_acc for r in records)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _merge({"seed": 0}, _load_config(args.config), args, ("seed",))
    if args.corrupt:
        with gc.corrupt_backward(args.corrupt):
            results = gc.run_all(cfg["seed"])
    else:
        results = gc.run_all(cfg["seed"])
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    defaults = {"sizes": [1000, 2000, 4000, 8000, 16000], "embed_dim": 4, "channels": 8,
                "lam": 10.0, "seed": 0, "repeats": 3, "exact": True, "out": "runs/bench"}
    cfg = _merge(defaults, _load_config(args.config), args,
                 ("sizes", "embed_dim", "channels", "seed", "out"))
    if args.no_exact:
        cfg["exact"] = False
    rows = bench_global(cfg["sizes"], d=cfg["embed_dim"], channels=cfg["channels"], lam=cfg["lam"],
                        seed=cfg["seed"], repeats=cfg["repeats"], exact=cfg["exact"],
                        threads=int(_THREADS))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_bench(rows, out / "bench.csv")
    print((out / "bench.csv").read_text(), end="")
    return 0


def cmd_dump_embeddings(args) -> int:
    cfg = _merge({"layer": 0, "out": "runs/embeddings"}, _load_config(args.config), args,
                 ("checkpoint", "nodes", "edges", "layer", "out"))
    for k in ("checkpoint", "nodes", "edges"):
        if k not in cfg:
            raise SystemExit(f"dump-embeddings: missing {k}")
    model = load_model(cfg["checkpoint"])
    graph = load_graph(cfg["nodes"], cfg["edges"])
    for path in dump_embeddings(model, graph, cfg["out"], layer=cfg["layer"]):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phgcn", description="Graph attention with lattice-filtered "
                                     "global aggregation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True):
        p.add_argument("--config", help="JSON config file")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (64-bit)")
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="bitwise-reproducible outputs (wall-clock column written as 0)")

    p = sub.add_parser("train", help="full-batch node classification on TSV graph files")
    common(p)
    p.add_argument("--nodes")
    p.add_argument("--edges")
    p.add_argument("--lr", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("motif", help="inductive motif-chain experiment")
    common(p)
    p.add_argument("--kind", choices=["phgcn", "gat", "gat_eda", "gcn"])
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_motif)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p, out=False)
    p.add_argument("--corrupt", metavar="OP", help=argparse.SUPPRESS)  # fault-injection test hook
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="lattice vs exact global aggregation timings")
    common(p)
    p.add_argument("--sizes", type=int, nargs="+")
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--no-exact", action="store_true", help="skip the quadratic path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-embeddings", help="per-head node embeddings of a trained model")
    common(p, seed=False)
    p.add_argument("--checkpoint", help="directory holding config.json and checkpoint.bin")
    p.add_argument("--nodes")
    p.add_argument("--edges")
    p.add_argument("--layer", type=int)
    p.set_defaults(func=cmd_dump_embeddings)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
