"""
Counting motifs along a chain
=============================

A chain of triangles, 4-cycles and single spacer nodes. Each red node is
labeled 1 when its motif is the more frequent one in the whole chain, which no
3-hop neighborhood can see. Global attention lets red nodes compare notes.
"""

import numpy as np

from phgcn.graph import MotifSpec, gen_motif_chain
from phgcn.training import MotifSettings, train_motif

rng = np.random.default_rng(1)
g = gen_motif_chain(MotifSpec(), 10, rng)
names = {0: "triangle", 1: "4-cycle", 2: "spacer"}
print("chain:", " - ".join(names[k] for k in g.meta["elements"]))
print("triangles vs 4-cycles:", g.meta["counts"])
red = np.flatnonzero(g.labels >= 0)
print("red nodes:", red.tolist(), "labels:", g.labels[red].tolist())

# a short run: accuracy on balanced red-node pairs from 100 held-out chains
for kind in ("phgcn", "gat"):
    settings = MotifSettings(kind=kind, iterations=600, eval_every=200)
    for rec in train_motif(settings, seed=0):
        print(f"{kind:5s} iter {rec.iteration:4d}  eval acc {rec.val_acc:.2f}")

# the full comparison (5 seeds, 3000 iterations) is `phgcn motif --kind ...`
