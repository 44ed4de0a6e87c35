import numpy as np
import pytest

from pagnn import autodiff as ad
from pagnn.graph import PerturbationSet, make_label_splits, sbm_generate, select_labeled_pool, support_query_split
from pagnn.losses import LossConfig
from pagnn.meta import (DivergenceError, EarlyStopper, FineTuneConfig, GraphTask, MetaConfig, TrainLog,
                        fine_tune, inner_adapt, meta_gradient, meta_step, train_ablation, train_meta)
from pagnn.model import ModelConfig, init_params


class Quadratic:
    """Scalar task with support and query loss ``c * theta**2``."""

    def __init__(self, c: float):
        self.c = c

    def support_loss(self, params):
        return self.c * params["theta"] * params["theta"]

    query_loss = support_loss


def _meta_grad(cs, theta, alpha, steps, second_order=True):
    cfg = MetaConfig(inner_lr=alpha, outer_lr=0.1, inner_steps=steps, second_order=second_order)
    grad, _ = meta_gradient({"theta": np.array(theta)}, [Quadratic(c) for c in cs], cfg)
    return float(grad["theta"])


def test_inner_adapt_quadratic():
    cfg = MetaConfig(inner_lr=0.1, inner_steps=1)
    assert inner_adapt({"theta": np.array(1.0)}, Quadratic(1.0), cfg)["theta"].item() == pytest.approx(0.8)
    cfg5 = MetaConfig(inner_lr=0.1, inner_steps=5)
    assert inner_adapt({"theta": np.array(2.0)}, Quadratic(1.0), cfg5)["theta"].item() == pytest.approx(0.32768 * 2)
    cfg0 = MetaConfig(inner_lr=0.0, inner_steps=3)
    assert inner_adapt({"theta": np.array(2.0)}, Quadratic(1.0), cfg0)["theta"].item() == 2.0


def test_single_task_meta_gradient_is_1_28():
    assert _meta_grad([1.0], 1.0, 0.1, 1) == pytest.approx(1.28, abs=1e-12)


@pytest.mark.parametrize("steps", [1, 5])
@pytest.mark.parametrize("cs,theta,alpha", [((1.0, 3.0), 0.7, 0.05), ((0.5, 2.0), -1.3, 0.1)])
def test_two_task_exact_meta_gradient(cs, theta, alpha, steps):
    # theta' = (1 - 2 alpha c)^steps theta, so d/dtheta c theta'^2 = 2c (1 - 2 alpha c)^(2 steps) theta
    oracle = sum(2 * c * (1 - 2 * alpha * c) ** (2 * steps) * theta for c in cs)
    assert _meta_grad(cs, theta, alpha, steps) == pytest.approx(oracle, abs=1e-6)


@pytest.mark.parametrize("steps", [1, 5])
def test_first_order_meta_gradient(steps):
    cs, theta, alpha = (1.0, 3.0), 0.7, 0.05
    oracle = sum(2 * c * (1 - 2 * alpha * c) ** steps * theta for c in cs)
    assert _meta_grad(cs, theta, alpha, steps, second_order=False) == pytest.approx(oracle, abs=1e-12)


def test_zero_inner_steps_gives_plain_gradient():
    assert _meta_grad([1.0, 3.0], 0.7, 0.1, 0) == pytest.approx(2 * 4.0 * 0.7, abs=1e-15)


def test_alpha_zero_meta_step_is_gradient_descent():
    cfg = MetaConfig(inner_lr=0.0, outer_lr=0.1, inner_steps=5)
    res = meta_step({"theta": np.array(0.7)}, [Quadratic(1.0), Quadratic(3.0)], cfg)
    assert abs(res.theta["theta"] - (0.7 - 0.1 * 2 * 4.0 * 0.7)) < 1e-10


def test_meta_step_needs_tasks():
    with pytest.raises(ValueError):
        meta_step({"theta": np.array(1.0)}, [], MetaConfig())


def test_early_stopper_keeps_best_not_last():
    stopper = EarlyStopper(patience=2)
    assert not stopper.update(0.5, {"w": np.array(1.0)}, 0)
    assert not stopper.update(0.7, {"w": np.array(2.0)}, 1)
    assert not stopper.update(0.6, {"w": np.array(3.0)}, 2)
    assert stopper.update(0.7, {"w": np.array(4.0)}, 3)
    assert stopper.best_params["w"] == 2.0 and stopper.best_iteration == 1


@pytest.fixture(scope="module")
def small_world():
    cfg = ModelConfig(n_layers=2, hidden_total=8, n_heads=2, output_heads=1)
    parent = sbm_generate(120, 2, 0.15, 0.02, 6, 0.6, seed=0)
    target = parent
    split = make_label_splits(target, 0.2, 0.2, seed=0)
    g = sbm_generate(60, 2, 0.2, 0.02, 6, 0.6, seed=1)
    cross = [(u, v) for u in range(60) for v in range(u + 1, 60)
             if g.labels[u] != g.labels[v] and (u, v) not in g.edge_set()][:6]
    poisoned = g.with_edges(np.concatenate([g.edges, np.array(cross)]))
    pool = select_labeled_pool(poisoned, 0.4, seed=0)
    return cfg, target, split, poisoned, PerturbationSet(cross), pool


def test_alpha_zero_train_meta_matches_plain_training(small_world):
    cfg, target, split, g, ptb, pool = small_world
    task = GraphTask(g, ptb, pool, cfg, LossConfig())
    mc = MetaConfig(inner_lr=0.0, outer_lr=0.05, inner_steps=2, max_outer_iters=4, patience=100)
    theta0 = init_params(cfg, 6, 2, seed=3)
    _, log = train_meta([task], target, split, cfg, mc, seed=9, theta=theta0)

    rng = np.random.default_rng(9)
    theta = {k: v.copy() for k, v in theta0.items()}
    manual = []
    for _ in range(4):
        query = support_query_split(pool, rng).query
        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in theta.items()}
        loss = GraphTask(g, ptb, pool, cfg, LossConfig()).loss(leaves, query).objective
        manual.append(loss.item())
        grads = ad.grad(loss, leaves.values())
        theta = {k: theta[k] - 0.05 * gr.data for k, gr in zip(theta, grads)}
    logged = [r["query_loss"] for r in log.rows]
    np.testing.assert_allclose(logged, manual, rtol=0, atol=1e-10)


def test_train_meta_is_deterministic(small_world):
    cfg, target, split, g, ptb, pool = small_world
    mc = MetaConfig(inner_lr=0.05, outer_lr=0.05, inner_steps=2, max_outer_iters=3)
    runs = []
    for _ in range(2):
        task = GraphTask(g, ptb, pool, cfg, LossConfig())
        theta, log = train_meta([task], target, split, cfg, mc, seed=4)
        runs.append((theta, log.deterministic_rows()))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        assert runs[0][0][k].tobytes() == runs[1][0][k].tobytes()


def test_train_meta_returns_best_validation_iterate(small_world):
    cfg, target, split, g, ptb, pool = small_world
    task = GraphTask(g, ptb, pool, cfg, LossConfig())
    mc = MetaConfig(inner_lr=0.05, outer_lr=0.5, inner_steps=1, max_outer_iters=6, patience=100)
    theta, log = train_meta([task], target, split, cfg, mc, seed=1)
    from pagnn.model import accuracy
    best = max([accuracy(init_params(cfg, 6, 2, seed=np.random.default_rng(1)), target, cfg, split.validation)]
               + [r["val_accuracy"] for r in log.rows])
    assert accuracy(theta, target, cfg, split.validation) == best


def test_train_meta_needs_tasks(small_world):
    cfg, target, split, *_ = small_world
    with pytest.raises(ValueError):
        train_meta([], target, split, cfg, MetaConfig())


def test_divergence_is_reported(small_world):
    cfg, target, split, g, ptb, pool = small_world
    task = GraphTask(g, ptb, pool, cfg, LossConfig())
    mc = MetaConfig(inner_lr=1e6, outer_lr=1e6, inner_steps=5, max_outer_iters=3)
    with pytest.raises(DivergenceError):
        train_meta([task], target, split, cfg, mc, seed=0)


def test_fine_tune_ignores_perturbations(small_world):
    cfg, target, split, *_ = small_world
    theta, log = fine_tune(init_params(cfg, 6, 2, seed=0), target, split, cfg, steps=3, lr=0.1)
    assert all(r["dist_loss"] == 0.0 for r in log.rows)
    assert {r["phase"] for r in log.rows} == {"finetune"}


def test_ablation_regimes_run(small_world):
    cfg, target, split, g, ptb, pool = small_world
    tasks = [GraphTask(g, ptb, pool, cfg, LossConfig())]
    mc = MetaConfig(inner_lr=0.05, outer_lr=0.05, inner_steps=1, max_outer_iters=2)
    tc = FineTuneConfig(steps=2, lr=0.05, patience=5)
    for regime in ("np", "pretrain_finetune", "joint"):
        theta, log = train_ablation(regime, target=target, target_split=split, model_config=cfg, tasks=tasks,
                                    meta_config=mc, tune_config=tc, seed=0)
        assert set(theta) == set(init_params(cfg, 6, 2, seed=0))
    np_log = train_ablation("np", target=target, target_split=split, model_config=cfg, tasks=tasks,
                            meta_config=mc, tune_config=tc, seed=0)[1]
    assert tasks[0].loss_config.lam == 1.0  # caller's tasks are left alone
    assert all(r["phase"] in ("meta", "finetune") for r in np_log.rows)
    with pytest.raises(ValueError):
        train_ablation("second_time", target=target, target_split=split, model_config=cfg)
    with pytest.raises(ValueError):
        train_ablation("np", target=target, target_split=split, model_config=cfg)
    with pytest.raises(ValueError):
        train_ablation("bogus", target=target, target_split=split, model_config=cfg)


def test_np_meta_objective_has_no_penalty(small_world):
    cfg, target, split, g, ptb, pool = small_world
    task = GraphTask(g, ptb, pool, cfg, LossConfig(lam=0.0))
    task.resplit(0)
    theta = init_params(cfg, 6, 2, seed=0)
    out = task.loss(theta, task.split.query)
    assert out.total == out.classification


def test_train_log_csv(tmp_path):
    log = TrainLog()
    log.append(phase="meta", iteration=0, task=0, query_loss=1.5, seconds=0.25)
    log.append(phase="meta", iteration=1, task=0, query_loss=1.25, seconds=0.5)
    with pytest.raises(ValueError):
        log.append(phase="meta", iteration=0, task=0)
    log.to_csv(tmp_path / "a.csv", include_seconds=False)
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert "seconds" not in header
    log.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0].endswith("seconds")
