"""Multi-head attention GNN with recorded attention coefficients.

Per layer and head, the unnormalized score of message edge ``i <- j`` is
``LeakyReLU(a . [W h_i ; W h_j])``; scores are softmax-normalized over each
node's in-neighborhood (self-loop included) and used to average the
transformed neighbor features. Hidden layers concatenate their heads after the
activation, the output layer averages them and applies no activation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graph import Graph, MessageEdges

ACTIVATIONS = {"elu": ad.elu, "relu": ad.relu}


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_total: int = 64
    n_heads: int = 8
    output_heads: int = 1
    activation: str = "elu"
    leaky_slope: float = ad.DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.n_heads < 1 or self.output_heads < 1:
            raise ValueError("head counts must be positive")
        if self.hidden_total % self.n_heads:
            raise ValueError("hidden_total must be divisible by n_heads")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")

    def layer_shapes(self, input_dim: int, n_classes: int) -> list[tuple[int, int, int]]:
        """``(heads, d_in, d_head)`` for every layer."""
        shapes = []
        d_in = input_dim
        for layer in range(self.n_layers):
            if layer == self.n_layers - 1:
                shapes.append((self.output_heads, d_in, n_classes))
            else:
                shapes.append((self.n_heads, d_in, self.hidden_total // self.n_heads))
                d_in = self.hidden_total
        return shapes


# Parameters are a plain ordered mapping ``{"layer{l}.W": (K, d_in, d_head),
# "layer{l}.a": (K, 2 * d_head)}``; values are arrays outside a tape and
# Tensors inside one.
ModelParams = dict


def init_params(config: ModelConfig, input_dim: int, n_classes: int, seed=None) -> ModelParams:
    """Glorot-uniform weights and attention vectors, deterministic per seed."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params = {}
    for layer, (heads, d_in, d_out) in enumerate(config.layer_shapes(input_dim, n_classes)):
        w_lim = np.sqrt(6.0 / (d_in + d_out))
        a_lim = np.sqrt(6.0 / (2 * d_out + 1))
        params[f"layer{layer}.W"] = rng.uniform(-w_lim, w_lim, size=(heads, d_in, d_out))
        params[f"layer{layer}.a"] = rng.uniform(-a_lim, a_lim, size=(heads, 2 * d_out))
    return params


def params_on_tape(params: Mapping[str, np.ndarray], tape: Tape) -> dict[str, Tensor]:
    return {name: tape.leaf(value) for name, value in params.items()}


def params_to_numpy(params: Mapping) -> ModelParams:
    return {name: np.array(v.data if isinstance(v, Tensor) else v) for name, v in params.items()}


@dataclass(frozen=True)
class AttentionRecord:
    """Scores of one layer: ``scores`` unnormalized, ``alpha`` normalized, both ``(heads, E)``."""

    layer: int
    scores: Tensor
    alpha: Tensor
    edges: MessageEdges

    @property
    def n_heads(self) -> int:
        return self.scores.shape[0]


def _split_attention(a: Tensor, d_head: int) -> tuple[Tensor, Tensor]:
    heads = a.shape[0]
    a_dst = ad.reshape(a[:, :d_head], (heads, d_head, 1))
    a_src = ad.reshape(a[:, d_head:], (heads, d_head, 1))
    return a_dst, a_src


def transform(W: Tensor, H) -> Tensor:
    """Per-head linear map: ``(N, d_in) x (K, d_in, d) -> (K, N, d)``."""
    return ad.matmul(H, W)


def attention_coefficients(W: Tensor, a: Tensor, H, edges: MessageEdges,
                           slope: float = ad.DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Unnormalized scores ``(K, E)`` for every head and message edge."""
    W, a, H = ad.as_tensor(W), ad.as_tensor(a), ad.as_tensor(H)
    if H.ndim != 2 or W.ndim != 3 or H.shape[1] != W.shape[1]:
        raise ad.DimensionError(f"features {H.shape} do not match weights {W.shape}")
    if a.shape != (W.shape[0], 2 * W.shape[2]):
        raise ad.DimensionError(f"attention vector shape {a.shape} does not match weights {W.shape}")
    return _scores(transform(W, H), a, edges, slope)


def _scores(Wh: Tensor, a: Tensor, edges: MessageEdges, slope: float) -> Tensor:
    heads, n, d_head = Wh.shape
    a_dst, a_src = _split_attention(a, d_head)
    s_dst = ad.reshape(ad.matmul(Wh, a_dst), (heads, n))
    s_src = ad.reshape(ad.matmul(Wh, a_src), (heads, n))
    pre = ad.take(s_dst, edges.dst, axis=1) + ad.take(s_src, edges.src, axis=1)
    return ad.leaky_relu(pre, slope)


def normalize_attention(scores: Tensor, edges: MessageEdges) -> Tensor:
    """Softmax of scores over each destination node's in-neighborhood."""
    return ad.segment_softmax(scores, edges.dst, edges.n_nodes)


def layer_forward(W: Tensor, a: Tensor, H, edges: MessageEdges, *, layer: int = 0,
                  output: bool = False, activation: str = "elu",
                  slope: float = ad.DEFAULT_LEAKY_SLOPE) -> tuple[Tensor, AttentionRecord]:
    H = ad.as_tensor(H)
    Wh = transform(W, H)
    heads, n, d_head = Wh.shape
    scores = _scores(Wh, a, edges, slope)
    alpha = normalize_attention(scores, edges)
    agg = ad.spmm(alpha, Wh, edges.src, edges.dst, n)
    if output:
        out = ad.mean(agg, axis=0)
    else:
        out = ACTIVATIONS[activation](agg)
        out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, heads * d_head))
    return out, AttentionRecord(layer, scores, alpha, edges)


def model_forward(params: Mapping, graph: Graph, config: ModelConfig) -> tuple[Tensor, list[AttentionRecord]]:
    """Logits ``(N, C)`` and one attention record per layer."""
    H = Tensor(graph.features)
    edges = graph.message_edges
    records = []
    for layer in range(config.n_layers):
        W = ad.as_tensor(params[f"layer{layer}.W"])
        a = ad.as_tensor(params[f"layer{layer}.a"])
        H, record = layer_forward(W, a, H, edges, layer=layer, output=layer == config.n_layers - 1,
                                  activation=config.activation, slope=config.leaky_slope)
        records.append(record)
    return H, records


def predict(params: Mapping, graph: Graph, config: ModelConfig) -> np.ndarray:
    logits, _ = model_forward(params_to_numpy(params), graph, config)
    return logits.data.argmax(axis=1)


def accuracy(params: Mapping, graph: Graph, config: ModelConfig, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        return float("nan")
    pred = predict(params, graph, config)
    return float(np.mean(pred[nodes] == graph.labels[nodes]))


# ----------------------------------------------------------------------------
# checkpoints

def checkpoint_document(params: Mapping, config: ModelConfig | None = None) -> dict:
    entries = {}
    for name, value in params_to_numpy(params).items():
        layer, kind = name.split(".")
        for head, block in enumerate(value):
            entries[f"{layer}.head{head}.{kind}"] = {
                "shape": list(block.shape),
                "values": [float(x) for x in block.reshape(-1)],
            }
    doc = {"params": entries}
    if config is not None:
        doc["config"] = {
            "n_layers": config.n_layers,
            "hidden_total": config.hidden_total,
            "n_heads": config.n_heads,
            "output_heads": config.output_heads,
            "activation": config.activation,
            "leaky_slope": config.leaky_slope,
        }
    return doc


def save_checkpoint(params: Mapping, path, config: ModelConfig | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_document(params, config), separators=(",", ":")) + "\n",
                          encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    blocks: dict[str, dict[int, np.ndarray]] = {}
    for key, entry in doc["params"].items():
        layer, head, kind = key.split(".")
        block = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        blocks.setdefault(f"{layer}.{kind}", {})[int(head.removeprefix("head"))] = block
    params = {}
    for name in sorted(blocks, key=lambda s: (int(s.split(".")[0].removeprefix("layer")), s)):
        heads = blocks[name]
        params[name] = np.stack([heads[k] for k in range(len(heads))])
    config = ModelConfig(**doc["config"]) if "config" in doc else None
    return params, config
