"""Layers and models: PH-GCN, GAT-EDA, GAT and GCN, plus checkpoint I/O.

Weights act on row-vector node features: a head's projection ``W`` has shape
(F', F) and maps the (N, F) feature matrix to ``H @ W.T``.

Checkpoint files are a flat list of named float64 tensors::

    b"PHGCNCK1" | uint32 count | count x (uint16 name_len | name utf-8 |
                                           uint8 ndim | ndim x uint64 dims |
                                           little-endian f64 payload)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import (
    HeadParams,
    global_aggregate_exact,
    global_aggregate_lattice,
    structural_aggregate,
)
from .autograd import Tensor
from .graph import Graph

LAYER_KINDS = ("phgcn", "gat_eda", "gat", "gcn")
ACTIVATIONS = {"elu": ag.elu, "none": None}


@dataclass
class LayerConfig:
    kind: str
    in_dim: int
    out_dim: int
    heads: int = 1
    embed_dim: int = 4
    lam_struct: float = 1.0
    lam_global: float = 10.0
    dropout: float = 0.0
    attn_dropout: float = 0.0
    activation: str = "elu"
    pathways: str = "concat"
    global_mode: str = "lattice"

    @property
    def out_width(self) -> int:
        if self.kind == "phgcn" and self.pathways == "concat":
            return 2 * self.heads * self.out_dim
        return self.heads * self.out_dim

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.heads < 1 or self.in_dim < 1 or self.out_dim < 1 or self.embed_dim < 1:
            raise ValueError(f"layer dimensions must be positive: {self}")
        if self.kind == "gcn" and self.heads != 1:
            raise ValueError("gcn layers have a single head")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pathways not in ("concat", "mean"):
            raise ValueError(f"unknown pathway merge {self.pathways!r}")
        if self.global_mode not in ("lattice", "exact"):
            raise ValueError(f"unknown global mode {self.global_mode!r}")
        if not (self.lam_struct > 0 and self.lam_global > 0):
            raise ValueError("decay rates must be positive")
        if not (0 <= self.dropout < 1 and 0 <= self.attn_dropout < 1):
            raise ValueError("dropout probabilities must be in [0, 1)")


@dataclass
class ModelConfig:
    layers: list[LayerConfig]
    n_classes: int
    seed: int = 0
    embed_init: float = 1.0

    def validate(self) -> None:
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for layer in self.layers:
            layer.validate()
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_width != nxt.in_dim:
                raise ValueError(f"layer width {prev.out_width} feeds in_dim {nxt.in_dim}")
        if self.layers[-1].out_width != self.n_classes:
            raise ValueError(f"final width {self.layers[-1].out_width} != {self.n_classes} classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["layers"] = [LayerConfig(**layer) for layer in d["layers"]]
        return cls(**d)


def make_config(kind: str, in_dim: int, n_classes: int, *, hidden: int = 8, heads: int = 2,
                n_layers: int = 2, embed_dim: int = 4, lam_struct: float = 1.0,
                lam_global: float = 10.0, dropout: float = 0.0, attn_dropout: float = 0.0,
                global_mode: str = "lattice", seed: int = 0, embed_init: float = 1.0) -> ModelConfig:
    """Stack ``n_layers`` layers of one kind.

    Hidden layers use ELU and concatenate heads; the last layer has one head,
    no activation and ``n_classes`` outputs (PH-GCN averages its two pathways
    there).
    """
    layers = []
    width = in_dim
    for i in range(n_layers):
        last = i == n_layers - 1
        layer = LayerConfig(
            kind=kind, in_dim=width,
            out_dim=n_classes if last else hidden,
            heads=1 if (last or kind == "gcn") else heads,
            embed_dim=embed_dim, lam_struct=lam_struct, lam_global=lam_global,
            dropout=dropout, attn_dropout=attn_dropout,
            activation="none" if last else "elu",
            pathways="mean" if last else "concat",
            global_mode=global_mode,
        )
        layers.append(layer)
        width = layer.out_width
    cfg = ModelConfig(layers, n_classes, seed, embed_init)
    cfg.validate()
    return cfg


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int, gain: float = 1.0) -> np.ndarray:
    a = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


class Model:
    """A stack of graph layers with named parameters."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, Tensor] = {}
        for li, layer in enumerate(config.layers):
            for a in range(layer.heads):
                pre = f"layers.{li}.heads.{a}."
                self._add(pre + "W", glorot(rng, layer.out_dim, layer.in_dim))
                if layer.kind in ("phgcn", "gat_eda"):
                    self._add(pre + "phi", glorot(rng, layer.embed_dim, layer.out_dim, config.embed_init))
                elif layer.kind == "gat":
                    self._add(pre + "a_dst", glorot(rng, layer.out_dim, 1))
                    self._add(pre + "a_src", glorot(rng, layer.out_dim, 1))

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Tensor(values, requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def head(self, li: int, a: int) -> HeadParams:
        layer = self.config.layers[li]
        pre = f"layers.{li}.heads.{a}."
        return HeadParams(self.params[pre + "W"], self.params[pre + "phi"],
                          layer.lam_struct, layer.lam_global)

    def forward(self, graph: Graph, features=None, *, training: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Logits (N, n_classes)."""
        h = Tensor(graph.features if features is None else features)
        for li in range(len(self.config.layers)):
            h = self.layer_forward(li, graph, h, training=training, rng=rng)
        return h

    __call__ = forward

    def layer_forward(self, li: int, graph: Graph, h: Tensor, *, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        layer = self.config.layers[li]
        if h.shape[1] != layer.in_dim:
            raise ValueError(f"layer {li} expects {layer.in_dim} input features, got {h.shape[1]}")
        x = ag.dropout(h, layer.dropout, training, rng)
        act = ACTIVATIONS[layer.activation]
        kw = dict(activation=act, attn_dropout=layer.attn_dropout, training=training, rng=rng)
        if layer.kind == "gcn":
            return gcn_layer(graph, x, self.params[f"layers.{li}.heads.0.W"], activation=act)
        outs = []
        for a in range(layer.heads):
            pre = f"layers.{li}.heads.{a}."
            if layer.kind == "gat":
                outs.append(gat_head(graph, x, self.params[pre + "W"], self.params[pre + "a_dst"],
                                     self.params[pre + "a_src"], **kw))
            elif layer.kind == "gat_eda":
                outs.append(gat_eda_head(graph, x, self.head(li, a), **kw))
            else:
                outs.append(phgcn_head(graph, x, self.head(li, a), pathways=layer.pathways,
                                       global_mode=layer.global_mode, **kw))
        return outs[0] if len(outs) == 1 else ag.concat_cols(*outs)

    def embeddings(self, graph: Graph, layer: int = 0) -> list[np.ndarray]:
        """Per-head node embeddings ``Phi W h`` of one Euclidean-attention layer (eval mode)."""
        if self.config.layers[layer].kind not in ("phgcn", "gat_eda"):
            raise ValueError(f"layer {layer} has no node embeddings")
        h = Tensor(graph.features)
        for li in range(layer):
            h = self.layer_forward(li, graph, h)
        out = []
        for a in range(self.config.layers[layer].heads):
            head = self.head(layer, a)
            out.append(head.embed(head.project(h)).values.copy())
        return out


# ---------------------------------------------------------------------------
# Single-head building blocks
# ---------------------------------------------------------------------------

def phgcn_head(graph: Graph, x: Tensor, head: HeadParams, *, activation=ag.elu,
               pathways: str = "concat", global_mode: str = "lattice", attn_dropout: float = 0.0,
               training: bool = False, rng=None) -> Tensor:
    """Structural and global aggregation sharing ``W``; concatenated (2F') or averaged (F')."""
    proj = head.project(x)
    emb = head.embed(proj)
    struct = structural_aggregate(graph, emb, proj, head.lam_struct, activation=None,
                                  attn_dropout=attn_dropout, training=training, rng=rng)
    glob_fn = global_aggregate_lattice if global_mode == "lattice" else global_aggregate_exact
    glob = glob_fn(emb, proj, head.lam_global, activation=None)
    if pathways == "mean":
        out = (struct + glob) * 0.5
        return out if activation is None else activation(out)
    if activation is not None:
        struct, glob = activation(struct), activation(glob)
    return ag.concat_cols(struct, glob)


def gat_eda_head(graph: Graph, x: Tensor, head: HeadParams, *, activation=ag.elu,
                 attn_dropout: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Structural pathway only (GAT with Euclidean-distance attention)."""
    proj = head.project(x)
    return structural_aggregate(graph, head.embed(proj), proj, head.lam_struct,
                                activation=activation, attn_dropout=attn_dropout,
                                training=training, rng=rng)


def gat_head(graph: Graph, x: Tensor, W: Tensor, a_dst: Tensor, a_src: Tensor, *,
             activation=ag.elu, attn_dropout: float = 0.0, training: bool = False,
             rng=None) -> Tensor:
    """Original GAT head: ``LeakyReLU(a^T [W h_i || W h_j])`` softmaxed over neighbors."""
    proj = ag.matmul(x, ag.transpose(W))
    rows = graph.edge_rows()
    s_dst = ag.gather_rows(ag.matmul(proj, a_dst), rows)
    s_src = ag.gather_rows(ag.matmul(proj, a_src), graph.indices)
    logits = ag.leaky_relu(ag.reshape(s_dst + s_src, (-1,)), 0.2)
    alpha = ag.segment_softmax(logits, graph.indptr)
    alpha = ag.dropout(alpha, attn_dropout, training, rng)
    out = ag.spmm(alpha, graph.indptr, graph.indices, proj)
    return out if activation is None else activation(out)


def gcn_norm(graph: Graph) -> np.ndarray:
    """Edge values of ``D^-1/2 A D^-1/2`` (self-loops already in ``A``)."""
    deg = np.diff(graph.indptr).astype(np.float64)
    return 1.0 / np.sqrt(deg[graph.edge_rows()] * deg[graph.indices])


def gcn_layer(graph: Graph, x: Tensor, W: Tensor, *, activation=ag.elu) -> Tensor:
    """``activation(D^-1/2 A D^-1/2 X W^T)``."""
    proj = ag.matmul(x, ag.transpose(W))
    out = ag.spmm(Tensor(gcn_norm(graph)), graph.indptr, graph.indices, proj)
    return out if activation is None else activation(out)


def phgcn_layer(graph: Graph, x: Tensor, heads: list[HeadParams], **kw) -> Tensor:
    """Concatenate ``phgcn_head`` over heads: width 2AF' (concat) or AF' (mean)."""
    outs = [phgcn_head(graph, x, h, **kw) for h in heads]
    return outs[0] if len(outs) == 1 else ag.concat_cols(*outs)


def gat_eda_layer(graph: Graph, x: Tensor, heads: list[HeadParams], **kw) -> Tensor:
    outs = [gat_eda_head(graph, x, h, **kw) for h in heads]
    return outs[0] if len(outs) == 1 else ag.concat_cols(*outs)


def gat_layer(graph: Graph, x: Tensor, heads: list[tuple[Tensor, Tensor, Tensor]], **kw) -> Tensor:
    """``heads`` holds ``(W, a_dst, a_src)`` triples."""
    outs = [gat_head(graph, x, *h, **kw) for h in heads]
    return outs[0] if len(outs) == 1 else ag.concat_cols(*outs)


def model_forward(model: Model, graph: Graph, features=None, **kw) -> Tensor:
    return model.forward(graph, features, **kw)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PHGCNCK1"


def save_params(path, params: dict[str, Tensor | np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            arr = np.ascontiguousarray(t.values if isinstance(t, Tensor) else t, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out


def save_model(model: Model, directory) -> None:
    """Write ``config.json`` and ``checkpoint.bin`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2))
    save_params(directory / "checkpoint.bin", model.params)


def load_model(directory) -> Model:
    directory = Path(directory)
    model = Model(ModelConfig.from_dict(json.loads((directory / "config.json").read_text())))
    stored = load_params(directory / "checkpoint.bin")
    for name, t in model.params.items():
        if name not in stored or stored[name].shape != t.shape:
            raise ValueError(f"checkpoint does not match model at {name}")
        t.values = stored[name].copy()
    return model
