import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pagnn import autodiff as ad
from pagnn.autodiff import Tape, Tensor
from pagnn.graph import Graph, PerturbationSet
from pagnn.losses import (LossConfig, attention_means, cross_entropy, dist_loss, perturb_attention_sum,
                          perturbed_edge_masks, total_loss)
from pagnn.model import AttentionRecord, ModelConfig, init_params, model_forward


def _records_with(graph, normal_value, ptb_value, perturbed, layers=2, heads=2):
    """Attention records whose scores are constant on normal and on perturbed edges."""
    edges = graph.message_edges
    ptb, normal = perturbed_edge_masks(edges, perturbed, graph)
    scores = np.zeros((heads, edges.n_edges))
    scores[:, normal] = normal_value
    scores[:, ptb] = ptb_value
    scores[:, edges.is_self_loop] = -7.0  # must not influence the pools
    return [AttentionRecord(l, Tensor(scores), Tensor(scores), edges) for l in range(layers)]


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(Tensor(np.zeros((5, 4))), np.arange(5) % 4, np.arange(5))
    assert loss.item() == pytest.approx(math.log(4), abs=1e-15)


def test_cross_entropy_margin_limit():
    for margin, bound in [(10.0, 1e-3), (40.0, 1e-15)]:
        logits = np.full((3, 3), 0.0)
        logits[np.arange(3), np.arange(3)] = margin
        assert cross_entropy(Tensor(logits), np.arange(3), np.arange(3)).item() < bound


def test_cross_entropy_matches_scratch_evaluation():
    rng = np.random.default_rng(7)
    logits, labels = rng.normal(size=(5, 3)) * 3, np.array([0, 2, 1, 1, 0])
    ref = -sum(logits[i, labels[i]] - math.log(sum(math.exp(x) for x in logits[i])) for i in range(5)) / 5
    assert cross_entropy(Tensor(logits), labels, np.arange(5)).item() == pytest.approx(ref, abs=1e-12)


def test_cross_entropy_rejects_empty_and_unlabeled():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, 1]), [])
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros((2, 2))), np.array([0, -1]), [0, 1])


@pytest.mark.parametrize("normal,ptb,eta,expected", [
    (5.0, 3.0, 100.0, -2.0),
    (150.0, 0.0, 100.0, -100.0),
    (4.0, 4.0, 100.0, 0.0),
    (1.0, 3.0, 100.0, 2.0),
])
def test_hinge_values_are_exact(toy_graph, normal, ptb, eta, expected):
    perturbed = PerturbationSet([(0, 1), (3, 4)])
    records = _records_with(toy_graph, normal, ptb, perturbed)
    assert dist_loss(records, perturbed, toy_graph, eta).item() == expected


def test_empty_perturbations_give_zero(toy_graph):
    records = _records_with(toy_graph, 5.0, 3.0, PerturbationSet())
    assert dist_loss(records, PerturbationSet(), toy_graph, 100.0).item() == 0.0
    assert perturb_attention_sum(records, PerturbationSet(), toy_graph) == 0.0


def test_perturb_attention_sum_on_two_edges(toy_graph):
    cfg = ModelConfig(n_layers=2, hidden_total=4, n_heads=2, output_heads=2)
    _, records = model_forward(init_params(cfg, 3, 2, seed=0), toy_graph, cfg)
    perturbed = PerturbationSet([(0, 2), (3, 5)])
    edges = records[0].edges
    pairs = list(zip(edges.dst.tolist(), edges.src.tolist()))
    hand = 0.0
    for rec in records:
        for (u, v) in [(0, 2), (3, 5)]:
            for d, s in [(u, v), (v, u)]:
                hand += rec.scores.data[:, pairs.index((d, s))].sum()
    assert perturb_attention_sum(records, perturbed, toy_graph) == pytest.approx(hand, rel=1e-14)
    # 2 pairs * 2 directions * 2 layers * 2 heads terms


def test_perturb_attention_sum_totality(toy_graph):
    cfg = ModelConfig(n_layers=2, hidden_total=4, n_heads=2, output_heads=2)
    _, records = model_forward(init_params(cfg, 3, 2, seed=1), toy_graph, cfg)
    everything = PerturbationSet(toy_graph.edges)
    real = ~records[0].edges.is_self_loop
    total = sum(r.scores.data[:, real].sum() for r in records)
    assert perturb_attention_sum(records, everything, toy_graph) == pytest.approx(total, rel=1e-14)


@settings(max_examples=50)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0, 1000))
def test_dist_loss_range_and_saturation(normal, ptb, eta):
    g = Graph(4, np.zeros((4, 1)), np.array([[0, 1], [1, 2], [2, 3]]), np.zeros(4, int), 1)
    perturbed = PerturbationSet([(1, 2)])
    value = dist_loss(_records_with(g, normal, ptb, perturbed), perturbed, g, eta).item()
    assert value >= -eta
    assert (value == -eta) == (normal - ptb >= eta)


def test_dist_loss_gradient_signs(toy_graph):
    perturbed = PerturbationSet([(0, 1), (3, 4)])
    edges = toy_graph.message_edges
    ptb, normal = perturbed_edge_masks(edges, perturbed, toy_graph)
    tape = Tape()
    scores = tape.leaf(np.random.default_rng(0).normal(size=(2, edges.n_edges)))
    rec = [AttentionRecord(0, scores, scores, edges)]
    (g,) = ad.grad(dist_loss(rec, perturbed, toy_graph, 100.0), [scores])
    assert np.all(g.data[:, ptb] > 0) and np.all(g.data[:, normal] < 0)
    assert np.all(g.data[:, edges.is_self_loop] == 0)


def test_lambda_zero_is_plain_cross_entropy(toy_graph):
    cfg = ModelConfig(n_layers=2, hidden_total=4, n_heads=2, output_heads=1)
    logits, records = model_forward(init_params(cfg, 3, 2, seed=3), toy_graph, cfg)
    nodes = np.arange(6)
    out = total_loss(logits, records, toy_graph, nodes, PerturbationSet([(0, 1)]), LossConfig(lam=0.0))
    assert out.total == cross_entropy(logits, toy_graph.labels, nodes).item()
    assert out.distance != 0.0


def test_total_loss_gradient_finite_differences(toy_graph):
    cfg = ModelConfig(n_layers=2, hidden_total=4, n_heads=2, output_heads=2)
    params = init_params(cfg, 3, 2, seed=5)
    names = list(params)
    perturbed = PerturbationSet([(0, 2), (3, 5)])

    def f(*values):
        logits, records = model_forward(dict(zip(names, values)), toy_graph, cfg)
        return total_loss(logits, records, toy_graph, np.arange(6), perturbed, LossConfig(1.0, 100.0)).objective

    assert ad.finite_diff_check(f, [params[k] for k in names]) < 1e-4


def test_attention_means_pool_layers_and_heads(toy_graph):
    perturbed = PerturbationSet([(0, 1)])
    records = _records_with(toy_graph, 2.5, -1.0, perturbed)
    assert attention_means(records, perturbed, toy_graph) == (2.5, -1.0)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lam=-1.0)
    with pytest.raises(ValueError):
        LossConfig(eta=float("inf"))
