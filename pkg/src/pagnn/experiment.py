"""End-to-end experiment plumbing: scenarios, method dispatch, evaluation, and reports.

Everything here is a pure function of its configuration and seed, so reruns
write byte-identical artifacts.
"""

from __future__ import annotations

import csv
import io
import json
from functools import lru_cache
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attacks import AttackBudget, AttackResult, greedy_gradient_attack, pick_targets, random_attack, targeted_attack
from .graph import (Graph, NodeSplit, PerturbationSet, make_label_splits, sbm_generate, select_labeled_pool,
                    split_into_subgraphs)
from .losses import LossConfig, attention_means, dist_loss, perturb_attention_sum, perturbed_edge_masks
from .meta import (FineTuneConfig, GraphTask, MetaConfig, TrainLog, train_ablation, train_pagnn,
                   train_supervised)
from .model import ModelConfig, init_params, model_forward, params_to_numpy

METHODS = ("pagnn", "np", "second_time", "ft", "jt", "vanilla", "preprocess_baseline")
ATTACKS = ("greedy", "random", "targeted")
_REGIMES = {"np": "np", "second_time": "second_time", "ft": "pretrain_finetune", "jt": "joint"}


@dataclass(frozen=True)
class ScenarioConfig:
    n_nodes: int = 1000
    n_classes: int = 4
    p_in: float = 0.05
    p_out: float = 0.005
    feature_dim: int = 32
    feature_noise: float = 0.5
    n_subgraphs: int = 5
    pool_frac: float = 0.4
    train_frac: float = 0.1
    val_frac: float = 0.2


@dataclass(frozen=True)
class Scenario:
    """A clean target graph with its label split plus clean graphs with labeled pools."""

    target: Graph
    split: NodeSplit
    clean: tuple[tuple[Graph, np.ndarray], ...]


def derive_seeds(seed: int, count: int) -> list[int]:
    """Independent child seeds, stable for a given parent seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def build_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    s_parent, s_split, s_labels, *s_pools = derive_seeds(seed, 3 + config.n_subgraphs)
    parent = sbm_generate(config.n_nodes, config.n_classes, config.p_in, config.p_out,
                          config.feature_dim, config.feature_noise, seed=s_parent)
    parts = split_into_subgraphs(parent, config.n_subgraphs, seed=s_split)
    target = parts[0]
    split = make_label_splits(target, config.train_frac, config.val_frac, seed=s_labels)
    clean = tuple((g, select_labeled_pool(g, config.pool_frac, seed=s)) for g, s in zip(parts[1:], s_pools))
    return Scenario(target, split, clean)


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "greedy"
    budgets: tuple[float, ...] = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30)
    task_budget: float | None = None  # budget on clean graphs; None reuses the target's
    surrogate_steps: int = 200
    targets: int = 20  # targeted attack only
    per_target_budget: int = 5

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"attack kind must be one of {ATTACKS}")
        if not self.budgets:
            raise ValueError("budget grid must be non-empty")


def run_attack(graph: Graph, spec: AttackSpec, budget: float, seed, train_nodes=None) -> AttackResult:
    if spec.kind == "random":
        return random_attack(graph, AttackBudget.rate(budget), seed)
    if spec.kind == "targeted":
        if budget == 0:
            return AttackResult(graph, PerturbationSet(), [])
        targets = pick_targets(graph, spec.targets, seed)
        return targeted_attack(graph, targets, spec.per_target_budget, seed)
    return greedy_gradient_attack(graph, AttackBudget.rate(budget), spec.surrogate_steps, seed,
                                  train_nodes=train_nodes)


def preprocess_graph(graph: Graph, threshold: float = 0.0) -> Graph:
    """Drop edges whose endpoint features have cosine similarity below ``threshold``."""
    if graph.n_edges == 0:
        return graph
    norms = np.linalg.norm(graph.features, axis=1)
    norms[norms == 0] = 1.0
    unit = graph.features / norms[:, None]
    u, v = graph.edges[:, 0], graph.edges[:, 1]
    keep = np.einsum("ij,ij->i", unit[u], unit[v]) >= threshold
    return graph.with_edges(graph.edges[keep])


@dataclass(frozen=True)
class TrainingConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    preprocess_threshold: float = 0.0


@dataclass(frozen=True)
class Trained:
    params: dict
    log: TrainLog
    graph: Graph  # graph the model aggregates over at test time
    perturbations: PerturbationSet  # known perturbations of that graph


def make_tasks(clean: Sequence[tuple[Graph, PerturbationSet, np.ndarray]], config: TrainingConfig,
               loss: LossConfig | None = None) -> list[GraphTask]:
    loss = loss or config.loss
    return [GraphTask(g, p, pool, config.model, loss) for g, p, pool in clean]


def run_method(method: str, target: Graph, split: NodeSplit, config: TrainingConfig, seed: int, *,
               tasks: Sequence[GraphTask] = (), target_perturbations: PerturbationSet | None = None,
               second_attack: AttackResult | None = None) -> Trained:
    """Train ``method`` for the poisoned ``target``.

    ``target_perturbations`` is only used for reporting; no method sees it
    during training.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    known = target_perturbations if target_perturbations is not None else PerturbationSet()
    mc = config.model
    if method == "pagnn":
        if not tasks:
            raise ValueError("pagnn needs clean-graph tasks")
        params, log = train_pagnn(tasks, target, split, mc, config.meta, config.finetune, seed)
        return Trained(params, log, target, known)
    if method in ("vanilla", "preprocess_baseline"):
        graph = preprocess_graph(target, config.preprocess_threshold) if method == "preprocess_baseline" else target
        theta = init_params(mc, graph.feature_dim, graph.n_classes, seed)
        ft = config.finetune
        params, log = train_supervised(theta, graph, split, None, mc, LossConfig(lam=0.0), ft.steps, ft.lr,
                                       ft.patience, phase=method)
        kept = _surviving(known, graph)
        return Trained(params, log, graph, kept)
    if method == "second_time":
        if second_attack is None:
            raise ValueError("second_time needs a second attack on the poisoned target")
        params, log = train_ablation("second_time", target=second_attack.poisoned, target_split=split,
                                     model_config=mc, loss_config=config.loss, meta_config=config.meta,
                                     tune_config=config.finetune,
                                     second_perturbations=second_attack.perturbations, seed=seed)
        return Trained(params, log, second_attack.poisoned, known)
    params, log = train_ablation(_REGIMES[method], target=target, target_split=split, model_config=mc,
                                 tasks=tasks, loss_config=config.loss, meta_config=config.meta,
                                 tune_config=config.finetune, seed=seed)
    return Trained(params, log, target, known)


def _surviving(perturbations: PerturbationSet, graph: Graph) -> PerturbationSet:
    if len(perturbations) == 0:
        return perturbations
    present = graph.edge_set()
    return PerturbationSet([e for e in map(tuple, perturbations.edges.tolist()) if e in present])


# ----------------------------------------------------------------------------
# evaluation

def evaluate(params: Mapping, graph: Graph, nodes, model_config: ModelConfig,
             perturbations: PerturbationSet | None = None, eta: float = 100.0) -> dict:
    """Test accuracy, per-class accuracy and, given perturbations, attention statistics."""
    nodes = np.asarray(nodes, dtype=np.int64)
    logits, records = model_forward(params_to_numpy(params), graph, model_config)
    pred = logits.data.argmax(axis=1)
    hit = pred[nodes] == graph.labels[nodes]
    report = {"accuracy": float(hit.mean()) if nodes.size else float("nan")}
    for c in range(graph.n_classes):
        mask = graph.labels[nodes] == c
        report[f"accuracy_class{c}"] = float(hit[mask].mean()) if mask.any() else float("nan")
    if perturbations is not None and len(perturbations):
        normal, ptb = attention_means(records, perturbations, graph)
        report["dist_loss"] = dist_loss(records, perturbations, graph, eta).item()
        report["perturb_attention_sum"] = perturb_attention_sum(records, perturbations, graph)
        report["mean_attention_normal"] = normal
        report["mean_attention_perturbed"] = ptb
    return report


def attention_histogram(params: Mapping, graph: Graph, perturbations: PerturbationSet,
                        model_config: ModelConfig, bins: int = 20) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts of unnormalized coefficients on normal and perturbed message edges over shared bins.

    Every (layer, head, directed edge) contributes one value; self-loops are
    excluded. Returns ``(edges, count_normal, count_perturbed)``.
    """
    _, records = model_forward(params_to_numpy(params), graph, model_config)
    ptb, normal = perturbed_edge_masks(records[0].edges, perturbations, graph)
    normal_vals = np.concatenate([r.scores.data[:, normal].ravel() for r in records])
    ptb_vals = np.concatenate([r.scores.data[:, ptb].ravel() for r in records])
    both = np.concatenate([normal_vals, ptb_vals])
    lo, hi = (float(both.min()), float(both.max())) if both.size else (0.0, 0.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return edges, np.histogram(normal_vals, edges)[0], np.histogram(ptb_vals, edges)[0]


def histogram_csv(edges: np.ndarray, normal: np.ndarray, perturbed: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin_left", "bin_right", "count_normal", "count_perturbed"])
    for i in range(len(normal)):
        writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(normal[i]), int(perturbed[i])])
    return buf.getvalue()


def attention_means_table(params: Mapping, graph: Graph, perturbations: PerturbationSet,
                          model_config: ModelConfig) -> str:
    """One-row CSV of mean unnormalized attention on normal and perturbed edges."""
    _, records = model_forward(params_to_numpy(params), graph, model_config)
    normal, ptb = attention_means(records, perturbations, graph)
    return f"normal_edges,perturbed_edges\n{normal!r},{ptb!r}\n"


# ----------------------------------------------------------------------------
# reports

METRIC_FIELDS = ("seed", "budget", "method", "lam", "eta", "accuracy", "dist_loss", "perturb_attention_sum",
                 "mean_attention_normal", "mean_attention_perturbed")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow([_fmt(row.get(k, "")) for k in METRIC_FIELDS])
    return buf.getvalue()


def aggregate(rows: Sequence[Mapping], keys=("budget", "method", "lam", "eta")) -> list[dict]:
    """Mean and sample standard deviation of accuracy over seeds, per cell."""
    cells: dict[tuple, list[float]] = {}
    for row in rows:
        cells.setdefault(tuple(row[k] for k in keys), []).append(float(row["accuracy"]))
    out = []
    for cell, values in cells.items():
        arr = np.array(values)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        out.append({**dict(zip(keys, cell)), "n_seeds": int(arr.size), "accuracy_mean": float(arr.mean()),
                    "accuracy_std": std})
    return out


def summary_json(rows: Sequence[Mapping], config: Mapping | None = None) -> str:
    doc = {"cells": aggregate(rows), "rows": [dict(r) for r in rows]}
    if config is not None:
        doc["config"] = config
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=True) + "\n"


def write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ----------------------------------------------------------------------------
# sweep cells

@dataclass(frozen=True)
class CellSpec:
    seed: int
    budget: float
    method: str
    lam: float
    eta: float


@lru_cache(maxsize=8)
def cached_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    return build_scenario(config, seed)


@lru_cache(maxsize=32)
def attacked_inputs(scenario_config: ScenarioConfig, attack: AttackSpec, seed: int, budget: float,
                    with_tasks: bool, with_second: bool):
    """Poisoned target, attacked clean graphs and the optional second attack for one (seed, budget)."""
    scenario = cached_scenario(scenario_config, seed)
    s_target, s_second, *s_tasks = derive_seeds(seed + 7919, 2 + len(scenario.clean))
    poisoned = run_attack(scenario.target, attack, budget, s_target, train_nodes=scenario.split.train)
    clean, second = [], None
    if with_tasks:
        task_budget = budget if attack.task_budget is None else attack.task_budget
        for (g, pool), s in zip(scenario.clean, s_tasks):
            res = run_attack(g, attack, task_budget, s, train_nodes=pool)
            clean.append((res.poisoned, res.perturbations, pool))
    if with_second:
        # the second attack needs a positive budget to fabricate any perturbation
        second = run_attack(poisoned.poisoned, attack, max(budget, 0.05), s_second,
                            train_nodes=scenario.split.train)
    return scenario, poisoned, tuple(clean), second


def run_cell(cell: CellSpec, scenario_config: ScenarioConfig, attack: AttackSpec, config: TrainingConfig) -> dict:
    """Build the seed's scenario, attack it, train ``cell.method`` and evaluate on the target test split."""
    needs_tasks = cell.method in ("pagnn", "np", "ft", "jt")
    scenario, poisoned, clean, second = attacked_inputs(scenario_config, attack, cell.seed, cell.budget,
                                                        needs_tasks, cell.method == "second_time")
    s_train = derive_seeds(cell.seed + 104729, 1)[0]
    loss = LossConfig(lam=0.0 if cell.method == "np" else cell.lam, eta=cell.eta)
    config = replace(config, loss=loss)
    tasks = make_tasks(clean, config) if needs_tasks else []
    trained = run_method(cell.method, poisoned.poisoned, scenario.split, config, s_train, tasks=tasks,
                         target_perturbations=poisoned.perturbations, second_attack=second)
    report = evaluate(trained.params, trained.graph, scenario.split.test, config.model, trained.perturbations,
                      cell.eta)
    return {**asdict(cell), **report}
