"""Edge-poisoning attacks producing a poisoned graph and its known perturbations.

The gradient attack is a desk-scale stand-in for metattack and the targeted
attack stands in for nettack. All attacks modify edges only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graph import Graph, PerturbationSet, _rng, save_graph


class AttackError(ValueError):
    """The requested budget cannot be met."""


@dataclass(frozen=True)
class AttackBudget:
    mode: str = "rate"  # "rate" of existing edges, or absolute "count"
    value: float = 0.0

    def __post_init__(self):
        if self.mode not in ("rate", "count"):
            raise ValueError("budget mode must be 'rate' or 'count'")
        if self.mode == "rate" and not 0.0 <= self.value <= 1.0:
            raise ValueError("rate budget must lie in [0, 1]")
        if self.mode == "count" and (self.value < 0 or int(self.value) != self.value):
            raise ValueError("count budget must be a non-negative integer")

    @classmethod
    def rate(cls, value: float) -> "AttackBudget":
        return cls("rate", float(value))

    @classmethod
    def count(cls, value: int) -> "AttackBudget":
        return cls("count", int(value))

    def resolve(self, n_edges: int) -> int:
        if self.mode == "count":
            return int(self.value)
        return int(round(self.value * n_edges))


@dataclass(frozen=True)
class AttackResult:
    """Poisoned graph, inserted edges, and the ordered decision log.

    Log rows are ``(u, v, score)``. Random flips log insertions with score
    ``+1`` and deletions with score ``-1``; the other attacks only insert.
    """

    poisoned: Graph
    perturbations: PerturbationSet
    log: list = field(default_factory=list)

    def save(self, graph_path, log_path=None) -> None:
        save_graph(self.poisoned, graph_path, self.perturbations)
        if log_path is not None:
            save_attack_log(self.log, log_path)


def save_attack_log(log, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "u", "v", "score"])
        for step, (u, v, score) in enumerate(log):
            writer.writerow([step, int(u), int(v), repr(float(score))])


def load_attack_log(path) -> list[tuple[int, int, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["u"]), int(r["v"]), float(r["score"])) for r in csv.DictReader(fh)]


def _pair_from_index(index: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    iu, iv = np.triu_indices(n, k=1)
    return iu[index], iv[index]


def random_attack(graph: Graph, budget: AttackBudget, seed=None) -> AttackResult:
    """Flip the connectivity of uniformly sampled node pairs."""
    n_flip = budget.resolve(graph.n_edges)
    n_pairs = graph.n_nodes * (graph.n_nodes - 1) // 2
    if n_flip > n_pairs:
        raise AttackError(f"budget {n_flip} exceeds the {n_pairs} available node pairs")
    if n_flip == 0:
        return AttackResult(graph, PerturbationSet(), [])
    rng = _rng(seed)
    u, v = _pair_from_index(rng.choice(n_pairs, size=n_flip, replace=False), graph.n_nodes)
    existing = graph.edge_set()
    edges = set(existing)
    inserted, log = [], []
    for a, b in zip(u.tolist(), v.tolist()):
        if (a, b) in existing:
            edges.discard((a, b))
            log.append((a, b, -1.0))
        else:
            edges.add((a, b))
            inserted.append((a, b))
            log.append((a, b, 1.0))
    poisoned = graph.with_edges(sorted(edges))
    return AttackResult(poisoned, PerturbationSet(inserted), log)


# ----------------------------------------------------------------------------
# gradient attack with a linearized two-layer surrogate

def _normalized_adjacency(adj):
    """``D^-1/2 (A + I) D^-1/2`` built from tape ops so it is differentiable in ``A``."""
    adj = ad.as_tensor(adj)
    n = adj.shape[0]
    a_hat = adj + np.eye(n)
    deg = a_hat.sum(axis=1, keepdims=True)
    d_inv_sqrt = ad.exp(ad.log(deg) * -0.5)
    return a_hat * d_inv_sqrt * ad.transpose(d_inv_sqrt)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class LinearSurrogate:
    """Softmax regression on two-hop normalized propagated features ``A^2 X``."""

    weights: np.ndarray

    @classmethod
    def fit(cls, graph: Graph, train_nodes, steps: int = 200, lr: float = 1.0,
            weight_decay: float = 5e-4, adjacency: np.ndarray | None = None) -> "LinearSurrogate":
        train_nodes = np.asarray(train_nodes, dtype=np.int64)
        adj = graph.adjacency() if adjacency is None else adjacency
        norm = _normalized_adjacency(adj).data
        z = (norm @ (norm @ graph.features))[train_nodes]
        y = np.eye(graph.n_classes)[graph.labels[train_nodes]]
        w = np.zeros((graph.feature_dim, graph.n_classes))
        for _ in range(steps):
            g = z.T @ (_softmax(z @ w) - y) / train_nodes.size + weight_decay * w
            w -= lr * g
        return cls(w)

    def logits(self, graph: Graph, adjacency: np.ndarray | None = None) -> np.ndarray:
        adj = graph.adjacency() if adjacency is None else adjacency
        norm = _normalized_adjacency(adj).data
        return norm @ (norm @ graph.features) @ self.weights

    def accuracy(self, graph: Graph, nodes) -> float:
        nodes = np.asarray(nodes, dtype=np.int64)
        pred = self.logits(graph).argmax(axis=1)
        return float(np.mean(pred[nodes] == graph.labels[nodes]))


def greedy_gradient_attack(graph: Graph, budget: AttackBudget, surrogate_steps: int = 200, seed=None,
                           train_nodes=None, self_training: bool = True) -> AttackResult:
    """Insert edges one at a time along the surrogate loss gradient.

    A linear two-layer surrogate is fit on the clean graph's training nodes.
    Each step differentiates the surrogate loss with respect to the dense
    adjacency matrix and inserts the non-adjacent pair with the largest
    positive loss increase, preferring pairs whose (pseudo-)labels differ.
    With ``self_training`` the loss covers all nodes, using surrogate
    predictions as labels for nodes outside ``train_nodes``.
    """
    n_insert = budget.resolve(graph.n_edges)
    if n_insert == 0:
        return AttackResult(graph, PerturbationSet(), [])
    if train_nodes is None:
        train_nodes = graph.labeled_nodes
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if train_nodes.size == 0:
        raise AttackError("the gradient attack needs labeled training nodes")
    n = graph.n_nodes
    n_free = n * (n - 1) // 2 - graph.n_edges
    if n_insert > n_free:
        raise AttackError(f"budget {n_insert} exceeds the {n_free} non-adjacent pairs")

    surrogate = LinearSurrogate.fit(graph, train_nodes, steps=surrogate_steps)
    pseudo = surrogate.logits(graph).argmax(axis=1)
    pseudo[train_nodes] = graph.labels[train_nodes]
    if self_training:
        loss_nodes, loss_labels = np.arange(n), pseudo
    else:
        loss_nodes, loss_labels = train_nodes, graph.labels[train_nodes]
    xw = graph.features @ surrogate.weights
    # tiny seeded jitter breaks exact score ties reproducibly
    jitter = _rng(seed).random((n, n)) * 1e-12

    adj = graph.adjacency()
    cross = pseudo[:, None] != pseudo[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    inserted, log = [], []
    for _ in range(n_insert):
        tape = Tape()
        a = tape.leaf(adj)
        loss = _surrogate_loss(a, xw, loss_nodes, loss_labels)
        (g,) = ad.grad(loss, [a])
        score = g.data + g.data.T + jitter
        free = upper & (adj == 0)
        pool = free & cross
        if not pool.any():
            pool = free
        masked = np.where(pool, score, -np.inf)
        flat = int(np.argmax(masked))
        u, v = divmod(flat, n)
        adj[u, v] = adj[v, u] = 1.0
        inserted.append((u, v))
        log.append((u, v, float(score[u, v] - jitter[u, v])))
    poisoned = graph.with_edges(np.concatenate([graph.edges, np.array(inserted, dtype=np.int64)]))
    return AttackResult(poisoned, PerturbationSet(inserted), log)


def _surrogate_loss(adj: Tensor, xw: np.ndarray, nodes, labels) -> Tensor:
    norm = _normalized_adjacency(adj)
    logits = ad.take(ad.matmul(norm, ad.matmul(norm, xw)), nodes, axis=0)
    z = logits - logits.data.max(axis=1, keepdims=True)
    log_p = z - ad.log(ad.exp(z).sum(axis=1, keepdims=True))
    return -ad.mean(log_p[np.arange(nodes.size), labels])


# ----------------------------------------------------------------------------
# targeted attack

def pick_targets(graph: Graph, count: int, seed=None) -> np.ndarray:
    labeled = graph.labeled_nodes
    if count > labeled.size:
        raise AttackError(f"cannot pick {count} targets from {labeled.size} labeled nodes")
    return np.sort(_rng(seed).choice(labeled, size=count, replace=False))


def targeted_attack(graph: Graph, targets, per_target_budget: int = 5, seed=None) -> AttackResult:
    """Connect each target to the most dissimilar differently-labeled nodes.

    Counterparts are ranked by ascending feature cosine similarity; ties are
    broken by a seeded random order.
    """
    targets = np.asarray(targets, dtype=np.int64)
    feats = graph.features
    norms = np.linalg.norm(feats, axis=1)
    norms[norms == 0] = 1.0
    unit = feats / norms[:, None]
    tie_order = _rng(seed).permutation(graph.n_nodes)
    edges = graph.edge_set()
    inserted, log = [], []
    for t in targets.tolist():
        y = graph.labels[t]
        sims = unit @ unit[t]
        eligible = (graph.labels >= 0) & (graph.labels != y)
        eligible[t] = False
        candidates = tie_order[eligible[tie_order]]
        candidates = candidates[np.argsort(sims[candidates], kind="stable")]
        added = 0
        for c in candidates.tolist():
            pair = (min(t, c), max(t, c))
            if pair in edges:
                continue
            edges.add(pair)
            inserted.append(pair)
            log.append((pair[0], pair[1], float(sims[c])))
            added += 1
            if added == per_target_budget:
                break
        if added < per_target_budget:
            raise AttackError(f"target {t} has only {added} eligible counterpart nodes")
    return AttackResult(graph.with_edges(sorted(edges)), PerturbationSet(inserted), log)
