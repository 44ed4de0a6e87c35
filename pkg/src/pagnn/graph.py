"""Undirected attributed graphs, their file format, and dataset construction.

Edges are stored once per unordered pair as rows ``(u, v)`` with ``u < v``,
sorted lexicographically. Labels use ``-1`` for unlabeled nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

UNLABELED = -1


class GraphLoadError(ValueError):
    """A graph file could not be parsed or violates a graph invariant."""


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def canonical_edges(pairs, n_nodes: int | None = None) -> np.ndarray:
    """Deduplicate unordered pairs into a sorted ``(E, 2)`` array with ``u < v``.

    Raises ``ValueError`` on self-pairs or out-of-range endpoints.
    """
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if np.any(arr[:, 0] == arr[:, 1]):
        bad = arr[arr[:, 0] == arr[:, 1]][0]
        raise ValueError(f"self-pair ({bad[0]}, {bad[1]}) is not allowed")
    if n_nodes is not None and (arr.min() < 0 or arr.max() >= n_nodes):
        raise ValueError(f"edge endpoint outside [0, {n_nodes})")
    arr = np.sort(arr, axis=1)
    return np.unique(arr, axis=0)


@dataclass(frozen=True)
class MessageEdges:
    """Directed message edges ``src -> dst`` including one self-loop per node.

    Sorted by ``(dst, src)`` so every node's in-neighborhood is contiguous.
    ``pair`` holds the canonical undirected edge index for each message edge
    and ``-1`` for self-loops.
    """

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    pair: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    @property
    def is_self_loop(self) -> np.ndarray:
        return self.pair < 0


@dataclass(frozen=True, eq=False)
class Graph:
    n_nodes: int
    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != self.n_nodes:
            raise ValueError(f"features must have shape ({self.n_nodes}, d), got {features.shape}")
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if labels.shape != (self.n_nodes,):
            raise ValueError("one label per node is required")
        if np.any((labels < UNLABELED) | (labels >= self.n_classes)):
            raise ValueError(f"labels must be -1 or in [0, {self.n_classes})")
        edges = canonical_edges(self.edges, self.n_nodes)
        for arr in (features, labels, edges):
            arr.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "edges", edges)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def labeled_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(u), int(v)) for u, v in self.edges}

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes))
        adj[self.edges[:, 0], self.edges[:, 1]] = 1.0
        adj[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return adj

    def with_edges(self, edges) -> "Graph":
        return Graph(self.n_nodes, self.features, edges, self.labels, self.n_classes)

    @cached_property
    def message_edges(self) -> MessageEdges:
        n, e = self.n_nodes, self.n_edges
        nodes = np.arange(n)
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1], nodes])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0], nodes])
        pair = np.concatenate([np.arange(e), np.arange(e), np.full(n, -1)])
        order = np.lexsort((src, dst))
        return MessageEdges(n, src[order], dst[order], pair[order])

    def permute(self, perm) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return Graph(self.n_nodes, self.features[inv], perm[self.edges], self.labels[inv], self.n_classes)


@dataclass(frozen=True, eq=False)
class PerturbationSet:
    """Known adversarial (inserted) edges of a graph."""

    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        edges = canonical_edges(self.edges)
        edges.flags.writeable = False
        object.__setattr__(self, "edges", edges)

    def __len__(self):
        return int(self.edges.shape[0])

    def validate(self, graph: Graph) -> None:
        if len(self) == 0:
            return
        codes = _pair_codes(graph.edges, graph.n_nodes)
        if not np.all(np.isin(_pair_codes(self.edges, graph.n_nodes), codes)):
            raise ValueError("perturbed edges must be present in the graph's edge set")

    def pair_mask(self, graph: Graph) -> np.ndarray:
        """Boolean mask over ``graph.edges`` marking perturbed pairs."""
        if len(self) == 0:
            return np.zeros(graph.n_edges, dtype=bool)
        return np.isin(_pair_codes(graph.edges, graph.n_nodes), _pair_codes(self.edges, graph.n_nodes))


def _pair_codes(edges: np.ndarray, n: int) -> np.ndarray:
    return edges[:, 0] * n + edges[:, 1]


@dataclass(frozen=True)
class NodeSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class SupportQuerySplit:
    support: np.ndarray
    query: np.ndarray


# ----------------------------------------------------------------------------
# file format

def graph_document(graph: Graph, perturbations: PerturbationSet | None = None) -> dict:
    doc = {
        "n_nodes": int(graph.n_nodes),
        "n_classes": int(graph.n_classes),
        "features": [[float(x) for x in row] for row in graph.features],
        "edges": graph.edges.tolist(),
        "labels": graph.labels.tolist(),
    }
    if perturbations is not None:
        doc["perturbed_edges"] = perturbations.edges.tolist()
    return doc


def save_graph(graph: Graph, path, perturbations: PerturbationSet | None = None) -> None:
    """Write ``graph`` (and optionally its perturbed edges) as a JSON document."""
    text = json.dumps(graph_document(graph, perturbations), separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def _require(doc: dict, key: str, kind):
    if key not in doc:
        raise GraphLoadError(f"missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise GraphLoadError(f"field {key!r} has the wrong type")
    return value


def _pairs(value, key: str) -> list:
    if not isinstance(value, list):
        raise GraphLoadError(f"field {key!r} must be a list of pairs")
    for i, item in enumerate(value):
        if (not isinstance(item, list) or len(item) != 2
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in item)):
            raise GraphLoadError(f"{key}[{i}]: expected an integer pair, got {item!r}")
    return value


def parse_graph_document(doc) -> tuple[Graph, PerturbationSet | None]:
    if not isinstance(doc, dict):
        raise GraphLoadError("top level must be an object")
    n = _require(doc, "n_nodes", int)
    n_classes = _require(doc, "n_classes", int)
    if n < 0 or n_classes < 1:
        raise GraphLoadError("n_nodes must be >= 0 and n_classes >= 1")
    features = _require(doc, "features", list)
    if len(features) != n:
        raise GraphLoadError(f"features has {len(features)} rows, expected {n}")
    widths = {len(row) if isinstance(row, list) else -1 for row in features}
    if len(widths) > 1 or -1 in widths:
        raise GraphLoadError("features must be N rows of equal length")
    try:
        feat = np.array(features, dtype=np.float64).reshape(n, widths.pop() if widths else 0)
    except (TypeError, ValueError) as err:
        raise GraphLoadError(f"features: {err}") from err
    if not np.all(np.isfinite(feat)):
        raise GraphLoadError("features contain non-finite values")
    labels = _require(doc, "labels", list)
    if len(labels) != n:
        raise GraphLoadError(f"labels has {len(labels)} entries, expected {n}")
    for i, y in enumerate(labels):
        if not isinstance(y, int) or isinstance(y, bool) or y < UNLABELED or y >= n_classes:
            raise GraphLoadError(f"labels[{i}]: {y!r} is not -1 or a class id below {n_classes}")
    edges = _pairs(_require(doc, "edges", list), "edges")
    for i, (u, v) in enumerate(edges):
        if u == v:
            raise GraphLoadError(f"edges[{i}]: self-loop ({u}, {v}) is not allowed")
        if not (0 <= u < n and 0 <= v < n):
            raise GraphLoadError(f"edges[{i}]: endpoint outside [0, {n})")
    graph = Graph(n, feat, edges, labels, n_classes)
    perturbations = None
    if "perturbed_edges" in doc:
        try:
            perturbations = PerturbationSet(_pairs(doc["perturbed_edges"], "perturbed_edges"))
            perturbations.validate(graph)
        except ValueError as err:
            raise GraphLoadError(f"perturbed_edges: {err}") from err
    return graph, perturbations


def read_graph_file(path) -> tuple[Graph, PerturbationSet | None]:
    """Load a graph file, returning the graph and its perturbed edges if present."""
    try:
        text = Path(path).read_text(encoding="utf-8")
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        line = text.splitlines()[err.lineno - 1] if text else ""
        raise GraphLoadError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}: {line[:80]!r}") from err
    try:
        return parse_graph_document(doc)
    except GraphLoadError as err:
        raise GraphLoadError(f"{path}: {err}") from err


def load_graph(path) -> Graph:
    return read_graph_file(path)[0]


# ----------------------------------------------------------------------------
# generation and splitting

def sbm_generate(n_nodes: int, n_classes: int, p_in: float, p_out: float, feature_dim: int,
                 feature_noise: float, seed=None) -> Graph:
    """Planted-partition graph with class-mean-plus-noise features.

    Classes have equal sizes (up to one node). Class means are random unit
    vectors; each node's features are its class mean plus isotropic Gaussian
    noise of scale ``feature_noise``.
    """
    if not 0.0 <= p_out < p_in <= 1.0:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    if n_nodes < 1 or n_classes < 1 or feature_dim < 1 or feature_noise < 0:
        raise ValueError("n_nodes, n_classes and feature_dim must be positive; feature_noise >= 0")
    rng = _rng(seed)
    labels = rng.permutation(np.arange(n_nodes) % n_classes)
    means = rng.normal(size=(n_classes, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    features = means[labels] + feature_noise * rng.normal(size=(n_nodes, feature_dim))
    iu, iv = np.triu_indices(n_nodes, k=1)
    prob = np.where(labels[iu] == labels[iv], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = np.stack([iu[keep], iv[keep]], axis=1)
    return Graph(n_nodes, features, edges, labels, n_classes)


def induced_subgraph(graph: Graph, nodes) -> Graph:
    """Subgraph on ``nodes`` (relabelled 0..k-1 in ascending original id order)."""
    nodes = np.sort(np.asarray(nodes, dtype=np.int64))
    new_id = np.full(graph.n_nodes, -1)
    new_id[nodes] = np.arange(nodes.size)
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    inside = (new_id[u] >= 0) & (new_id[v] >= 0)
    edges = np.stack([new_id[u[inside]], new_id[v[inside]]], axis=1)
    return Graph(int(nodes.size), graph.features[nodes], edges, graph.labels[nodes], graph.n_classes)


def split_into_subgraphs(graph: Graph, k: int, seed=None) -> list[Graph]:
    """Random node partition into ``k`` near-equal parts, keeping internal edges only."""
    if k < 1:
        raise ValueError("k must be positive")
    if k == 1:
        return [induced_subgraph(graph, np.arange(graph.n_nodes))]
    if graph.n_nodes < 10 * k:
        raise ValueError(f"need at least {10 * k} nodes to split into {k} subgraphs")
    perm = _rng(seed).permutation(graph.n_nodes)
    return [induced_subgraph(graph, part) for part in np.array_split(perm, k)]


def make_label_splits(graph: Graph, train_frac: float = 0.1, val_frac: float = 0.2, seed=None) -> NodeSplit:
    """Random train/validation/test split of the labeled nodes (floor rounding)."""
    if train_frac < 0 or val_frac < 0 or train_frac + val_frac >= 1:
        raise ValueError("need train_frac, val_frac >= 0 and train_frac + val_frac < 1")
    labeled = _rng(seed).permutation(graph.labeled_nodes)
    n_train = math.floor(train_frac * labeled.size)
    n_val = math.floor(val_frac * labeled.size)
    return NodeSplit(
        np.sort(labeled[:n_train]),
        np.sort(labeled[n_train:n_train + n_val]),
        np.sort(labeled[n_train + n_val:]),
    )


def select_labeled_pool(graph: Graph, frac: float = 0.4, seed=None) -> np.ndarray:
    """Random subset of labeled nodes used to build support/query sets of a clean graph."""
    if not 0 < frac <= 1:
        raise ValueError("frac must lie in (0, 1]")
    labeled = _rng(seed).permutation(graph.labeled_nodes)
    return np.sort(labeled[:math.floor(frac * graph.n_nodes)])


def support_query_split(pool, seed=None) -> SupportQuerySplit:
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size < 2:
        raise ValueError("support/query split needs at least 2 labeled nodes")
    perm = _rng(seed).permutation(pool)
    half = pool.size // 2
    return SupportQuerySplit(np.sort(perm[:half]), np.sort(perm[half:]))
