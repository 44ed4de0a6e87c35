"""Meta-optimization over perturbed clean graphs, fine-tuning, and ablation regimes.

A task exposes ``support_loss(params)`` and ``query_loss(params)`` returning
scalar tensors; :class:`GraphTask` is the one used for graphs, but any object
with those two methods (a scalar quadratic, say) can be meta-trained.
"""

from __future__ import annotations

import csv
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .graph import Graph, NodeSplit, PerturbationSet, SupportQuerySplit, _rng, support_query_split
from .losses import LossConfig, total_loss
from .model import ModelConfig, accuracy, init_params, model_forward, params_to_numpy


class DivergenceError(RuntimeError):
    """A loss became non-finite during training."""


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 5
    max_outer_iters: int = 200
    patience: int = 20
    second_order: bool = True

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be non-negative")
        if self.max_outer_iters < 1 or self.patience < 1:
            raise ValueError("max_outer_iters and patience must be positive")


@dataclass
class GraphTask:
    """One clean graph with its fabricated perturbations and labeled pool."""

    graph: Graph
    perturbations: PerturbationSet
    labeled_pool: np.ndarray
    model_config: ModelConfig
    loss_config: LossConfig
    split: SupportQuerySplit | None = None
    last: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labeled_pool = np.asarray(self.labeled_pool, dtype=np.int64)
        if self.labeled_pool.size == 0:
            raise ValueError("task needs a non-empty labeled pool")
        self.perturbations.validate(self.graph)

    def resplit(self, seed=None) -> SupportQuerySplit:
        self.split = support_query_split(self.labeled_pool, seed)
        return self.split

    def loss(self, params: Mapping, nodes):
        logits, records = model_forward(params, self.graph, self.model_config)
        return total_loss(logits, records, self.graph, nodes, self.perturbations, self.loss_config)

    def _split(self) -> SupportQuerySplit:
        if self.split is None:
            raise ValueError("task has no support/query split; call resplit() first")
        return self.split

    def support_loss(self, params: Mapping) -> Tensor:
        out = self.loss(params, self._split().support)
        self.last["support"] = out
        return out.objective

    def query_loss(self, params: Mapping) -> Tensor:
        out = self.loss(params, self._split().query)
        self.last["query"] = out
        return out.objective


@dataclass
class TrainLog:
    """Append-only per-iteration training records."""

    rows: list[dict] = field(default_factory=list)

    FIELDS = ("phase", "iteration", "task", "support_loss", "query_loss", "dist_loss",
              "val_accuracy", "seconds")

    def append(self, **row) -> None:
        if self.rows and row["phase"] == self.rows[-1]["phase"] and row["iteration"] < self.rows[-1]["iteration"]:
            raise ValueError("log iterations must be non-decreasing")
        self.rows.append({k: row.get(k, "") for k in self.FIELDS})

    def extend(self, other: "TrainLog") -> None:
        self.rows.extend(other.rows)

    def deterministic_rows(self) -> list[tuple]:
        """Rows without the wall-clock column."""
        return [tuple(r[k] for k in self.FIELDS if k != "seconds") for r in self.rows]

    def to_csv(self, path, include_seconds: bool = True) -> None:
        names = self.FIELDS if include_seconds else tuple(k for k in self.FIELDS if k != "seconds")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n", extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)


def _as_leaves(theta: Mapping, tape: Tape) -> dict[str, Tensor]:
    return {k: (v if isinstance(v, Tensor) and v.tape is tape else tape.leaf(ad.as_tensor(v).data))
            for k, v in theta.items()}


@contextmanager
def _diverges_as(where: str):
    """Re-raise non-finite values anywhere in the block as a training divergence."""
    try:
        yield
    except NonFiniteError as err:
        raise DivergenceError(f"{where}: {err}") from err


def _finite_params(theta: Mapping, where: str) -> dict:
    for name, value in theta.items():
        if not np.all(np.isfinite(value)):
            raise DivergenceError(f"{where}: parameter {name} became non-finite")
    return dict(theta)


def _checked(fn, params, where: str) -> Tensor:
    try:
        value = fn(params)
    except NonFiniteError as err:
        raise DivergenceError(f"{where}: {err}") from err
    return value


def inner_adapt(theta: Mapping, task, config: MetaConfig, task_id: int = 0) -> dict[str, Tensor]:
    """Gradient-descent adaptation of ``theta`` on the task's support loss.

    ``theta`` maps names to tensors on a tape (or arrays, which are put on a
    fresh tape). With ``config.second_order`` every step stays differentiable
    with respect to the incoming parameters.
    """
    params = dict(theta)
    if not all(isinstance(v, Tensor) and v.tape is not None for v in params.values()):
        params = _as_leaves(params, Tape())
    for _ in range(config.inner_steps):
        loss = _checked(task.support_loss, params, f"task {task_id} support loss")
        grads = ad.grad(loss, params.values(), create_graph=config.second_order)
        params = {k: p - config.inner_lr * g for (k, p), g in zip(params.items(), grads)}
    return params


@dataclass(frozen=True)
class MetaStepResult:
    theta: dict
    query_losses: list
    gradient: dict


def meta_gradient(theta: Mapping[str, np.ndarray], tasks: Sequence, config: MetaConfig) -> tuple[dict, list[float]]:
    """Gradient of the summed query losses of the adapted parameters, reduced in task order."""
    total = None
    losses = []
    for i, task in enumerate(tasks):
        tape = Tape()
        leaves = _as_leaves(theta, tape)
        adapted = inner_adapt(leaves, task, config, task_id=i)
        q = _checked(task.query_loss, adapted, f"task {i} query loss")
        grads = ad.grad(q, leaves.values())
        losses.append(q.item())
        if total is None:
            total = [g.data for g in grads]
        else:
            total = [t + g.data for t, g in zip(total, grads)]
    return dict(zip(theta.keys(), total)), losses


def meta_step(theta: Mapping[str, np.ndarray], tasks: Sequence, config: MetaConfig) -> MetaStepResult:
    """One outer SGD step on the sum of post-adaptation query losses."""
    if not tasks:
        raise ValueError("meta_step needs at least one task")
    gradient, losses = meta_gradient(theta, tasks, config)
    with np.errstate(over="ignore", invalid="ignore"):
        new = {k: np.asarray(ad.as_tensor(v).data) - config.outer_lr * gradient[k] for k, v in theta.items()}
    return MetaStepResult(_finite_params(new, "outer step"), losses, gradient)


class EarlyStopper:
    """Tracks the best validation accuracy and the parameters that achieved it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -np.inf
        self.best_params = None
        self.best_iteration = -1
        self.bad = 0

    def update(self, score: float, params: Mapping, iteration: int) -> bool:
        """Record ``score``; return True when training should stop."""
        if score > self.best_score:
            self.best_score = score
            self.best_params = {k: np.array(v) for k, v in params.items()}
            self.best_iteration = iteration
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


def train_meta(tasks: Sequence[GraphTask], target: Graph, target_split: NodeSplit, model_config: ModelConfig,
               config: MetaConfig, seed=None, theta: Mapping | None = None) -> tuple[dict, TrainLog]:
    """Meta-train an initialization; early-stopped on the target's validation accuracy."""
    if not tasks:
        raise ValueError("train_meta needs at least one task")
    rng = _rng(seed)
    if theta is None:
        theta = init_params(model_config, target.feature_dim, target.n_classes, rng)
    theta = params_to_numpy(theta)
    log = TrainLog()
    stopper = EarlyStopper(config.patience)
    stopper.update(accuracy(theta, target, model_config, target_split.validation), theta, -1)
    start = time.perf_counter()
    for it in range(config.max_outer_iters):
        for task in tasks:
            task.resplit(rng)
        with _diverges_as(f"outer iteration {it}"):
            step = meta_step(theta, tasks, config)
            theta = step.theta
            val = accuracy(theta, target, model_config, target_split.validation)
        for i, task in enumerate(tasks):
            support = task.last.get("support")
            log.append(phase="meta", iteration=it, task=i,
                       support_loss=support.total if support is not None else "", query_loss=step.query_losses[i],
                       dist_loss=task.last["query"].distance, val_accuracy=val,
                       seconds=round(time.perf_counter() - start, 3))
        if stopper.update(val, theta, it):
            break
    return stopper.best_params, log


def _sgd_train(theta: Mapping, objective, graph: Graph, split: NodeSplit, model_config: ModelConfig,
               steps: int, lr: float, patience: int, phase: str) -> tuple[dict, TrainLog]:
    theta = params_to_numpy(theta)
    log = TrainLog()
    stopper = EarlyStopper(patience)
    stopper.update(accuracy(theta, graph, model_config, split.validation), theta, -1)
    start = time.perf_counter()
    for it in range(steps):
        with _diverges_as(f"{phase} step {it}"):
            tape = Tape()
            leaves = _as_leaves(theta, tape)
            loss, dist = objective(leaves)
            grads = ad.grad(loss, leaves.values())
            with np.errstate(over="ignore", invalid="ignore"):
                theta = {k: theta[k] - lr * g.data for k, g in zip(theta, grads)}
            theta = _finite_params(theta, f"{phase} step {it}")
            val = accuracy(theta, graph, model_config, split.validation)
        log.append(phase=phase, iteration=it, task=-1, support_loss=loss.item(), dist_loss=dist,
                   val_accuracy=val, seconds=round(time.perf_counter() - start, 3))
        if stopper.update(val, theta, it):
            break
    return stopper.best_params, log


def fine_tune(theta: Mapping, graph: Graph, split: NodeSplit, model_config: ModelConfig, steps: int = 200,
              lr: float = 0.05, patience: int = 20) -> tuple[dict, TrainLog]:
    """SGD on the classification loss of the training nodes, early-stopped on validation accuracy."""
    loss_config = LossConfig(lam=0.0)

    def objective(params):
        logits, records = model_forward(params, graph, model_config)
        out = total_loss(logits, records, graph, split.train, None, loss_config)
        return out.objective, 0.0

    return _sgd_train(theta, objective, graph, split, model_config, steps, lr, patience, "finetune")


def train_supervised(theta: Mapping, graph: Graph, split: NodeSplit, perturbations: PerturbationSet | None,
                     model_config: ModelConfig, loss_config: LossConfig, steps: int = 200, lr: float = 0.05,
                     patience: int = 20, phase: str = "train") -> tuple[dict, TrainLog]:
    """Plain SGD on the combined loss of one graph's training nodes."""

    def objective(params):
        logits, records = model_forward(params, graph, model_config)
        out = total_loss(logits, records, graph, split.train, perturbations, loss_config)
        return out.objective, out.distance

    return _sgd_train(theta, objective, graph, split, model_config, steps, lr, patience, phase)


def train_joint(theta: Mapping, tasks: Sequence[GraphTask], target: Graph, target_split: NodeSplit,
                model_config: ModelConfig, steps: int, lr: float, patience: int,
                include_target: bool = False) -> tuple[dict, TrainLog]:
    """Non-meta joint training on all clean tasks (and optionally the target's training nodes)."""
    target_loss = LossConfig(lam=0.0)

    def objective(params):
        total, dist = None, 0.0
        for task in tasks:
            out = task.loss(params, task.labeled_pool)
            dist += out.distance
            total = out.objective if total is None else total + out.objective
        if include_target:
            logits, records = model_forward(params, target, model_config)
            total = total + total_loss(logits, records, target, target_split.train, None, target_loss).objective
        return total, dist

    return _sgd_train(theta, objective, target, target_split, model_config, steps, lr, patience, "joint")


ABLATIONS = ("np", "second_time", "pretrain_finetune", "joint")


@dataclass(frozen=True)
class FineTuneConfig:
    steps: int = 200
    lr: float = 0.05
    patience: int = 20


def train_pagnn(tasks: Sequence[GraphTask], target: Graph, target_split: NodeSplit, model_config: ModelConfig,
                meta_config: MetaConfig, tune_config: FineTuneConfig, seed=None) -> tuple[dict, TrainLog]:
    """Meta-train on the clean tasks, then fine-tune on the poisoned target."""
    theta, log = train_meta(tasks, target, target_split, model_config, meta_config, seed)
    theta, tune_log = fine_tune(theta, target, target_split, model_config, tune_config.steps,
                                tune_config.lr, tune_config.patience)
    log.extend(tune_log)
    return theta, log


def train_ablation(regime: str, *, target: Graph, target_split: NodeSplit, model_config: ModelConfig,
                   tasks: Sequence[GraphTask] | None = None, loss_config: LossConfig | None = None,
                   meta_config: MetaConfig | None = None, tune_config: FineTuneConfig | None = None,
                   second_perturbations: PerturbationSet | None = None, seed=None) -> tuple[dict, TrainLog]:
    """Train one of the ablation regimes ``np``, ``second_time``, ``pretrain_finetune`` or ``joint``.

    ``second_time`` expects ``second_perturbations``: edges fabricated by
    attacking the already-poisoned target again.
    """
    if regime not in ABLATIONS:
        raise ValueError(f"unknown regime {regime!r}; expected one of {ABLATIONS}")
    loss_config = loss_config or LossConfig()
    meta_config = meta_config or MetaConfig()
    tune_config = tune_config or FineTuneConfig()
    rng = _rng(seed)

    if regime == "second_time":
        if second_perturbations is None:
            raise ValueError("second_time needs perturbations from a second attack on the target")
        theta = init_params(model_config, target.feature_dim, target.n_classes, rng)
        return train_supervised(theta, target, target_split, second_perturbations, model_config, loss_config,
                                tune_config.steps, tune_config.lr, tune_config.patience, phase="second_time")

    if not tasks:
        raise ValueError(f"{regime} needs clean-graph tasks")
    if regime == "np":
        np_tasks = [replace(t, loss_config=replace(t.loss_config, lam=0.0), last={}) for t in tasks]
        return train_pagnn(np_tasks, target, target_split, model_config, meta_config, tune_config, rng)

    theta = init_params(model_config, target.feature_dim, target.n_classes, rng)
    theta, log = train_joint(theta, tasks, target, target_split, model_config, meta_config.max_outer_iters,
                             meta_config.outer_lr, meta_config.patience, include_target=regime == "joint")
    theta, tune_log = fine_tune(theta, target, target_split, model_config, tune_config.steps,
                                tune_config.lr, tune_config.patience)
    log.extend(tune_log)
    return theta, log
