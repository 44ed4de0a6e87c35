"""Training objectives: classification loss and the attention penalty on perturbed edges."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, MessageEdges, PerturbationSet
from .model import AttentionRecord


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    eta: float = 100.0

    def __post_init__(self):
        for name in ("lam", "eta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    classification: float
    distance: float
    perturb_attention_sum: float
    total: float
    objective: Tensor  # differentiable total


def cross_entropy(logits: Tensor, labels, nodes) -> Tensor:
    """Mean negative log-likelihood of the softmax of ``logits`` over ``nodes``."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("cross_entropy needs a non-empty node set")
    y = np.asarray(labels, dtype=np.int64)[nodes]
    if np.any(y < 0):
        raise ValueError("cross_entropy node set contains unlabeled nodes")
    z = ad.take(logits, nodes, axis=0)
    z = z - z.data.max(axis=1, keepdims=True)
    log_norm = ad.log(ad.exp(z).sum(axis=1, keepdims=True))
    picked = (z - log_norm)[np.arange(nodes.size), y]
    return -ad.mean(picked)


def perturbed_edge_masks(edges: MessageEdges, perturbed: PerturbationSet, graph: Graph) -> tuple[np.ndarray, np.ndarray]:
    """Indices of message edges that are perturbed / normal (self-loops are neither)."""
    pair_is_ptb = perturbed.pair_mask(graph)
    real = ~edges.is_self_loop
    ptb = np.zeros(edges.n_edges, dtype=bool)
    ptb[real] = pair_is_ptb[edges.pair[real]]
    normal = real & ~ptb
    return np.flatnonzero(ptb), np.flatnonzero(normal)


def _pooled(records: Sequence[AttentionRecord], index: np.ndarray) -> tuple[Tensor | None, int]:
    total, count = None, 0
    for rec in records:
        part = ad.take(rec.scores, index, axis=1).sum()
        total = part if total is None else total + part
        count += rec.n_heads * index.size
    return total, count


def perturb_attention_sum(records: Sequence[AttentionRecord], perturbed: PerturbationSet, graph: Graph) -> float:
    """Sum of unnormalized coefficients on perturbed message edges over layers and heads."""
    if not records or len(perturbed) == 0:
        return 0.0
    ptb, _ = perturbed_edge_masks(records[0].edges, perturbed, graph)
    return float(sum(rec.scores.data[:, ptb].sum() for rec in records))


def attention_means(records: Sequence[AttentionRecord], perturbed: PerturbationSet, graph: Graph) -> tuple[float, float]:
    """Pooled mean unnormalized attention over (normal, perturbed) message edges."""
    ptb, normal = perturbed_edge_masks(records[0].edges, perturbed, graph)
    means = []
    for index in (normal, ptb):
        if index.size == 0:
            means.append(float("nan"))
            continue
        total = sum(rec.scores.data[:, index].sum() for rec in records)
        means.append(float(total / sum(rec.n_heads * index.size for rec in records)))
    return means[0], means[1]


def dist_loss(records: Sequence[AttentionRecord], perturbed: PerturbationSet, graph: Graph, eta: float) -> Tensor:
    """``-min(eta, mean_normal - mean_perturbed)`` over pooled (layer, head, edge) scores.

    Returns a constant zero when no edge is perturbed.
    """
    if len(perturbed) == 0:
        return Tensor(0.0)
    ptb, normal = perturbed_edge_masks(records[0].edges, perturbed, graph)
    if normal.size == 0:
        raise ValueError("dist_loss needs at least one normal edge")
    normal_sum, normal_count = _pooled(records, normal)
    ptb_sum, ptb_count = _pooled(records, ptb)
    gap = normal_sum / float(normal_count) - ptb_sum / float(ptb_count)
    return -ad.minimum(gap, eta)


def total_loss(logits: Tensor, records: Sequence[AttentionRecord], graph: Graph, nodes,
               perturbed: PerturbationSet | None, config: LossConfig) -> LossBreakdown:
    """Classification loss plus ``lam`` times the distance penalty."""
    perturbed = perturbed if perturbed is not None else PerturbationSet()
    ce = cross_entropy(logits, graph.labels, nodes)
    if config.lam > 0 and len(perturbed):
        dist = dist_loss(records, perturbed, graph, config.eta)
        objective = ce + config.lam * dist
    else:
        dist = dist_loss(records, perturbed, graph, config.eta) if len(perturbed) else Tensor(0.0)
        objective = ce
    return LossBreakdown(
        classification=ce.item(),
        distance=dist.item(),
        perturb_attention_sum=perturb_attention_sum(records, perturbed, graph),
        total=objective.item(),
        objective=objective,
    )
