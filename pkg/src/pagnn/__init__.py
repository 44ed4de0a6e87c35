"""Attention GNN with penalized aggregation on perturbed edges, meta-trained over attacked clean graphs."""

from .autodiff import DimensionError, NonFiniteError, Tape, Tensor, grad
from .graph import Graph, NodeSplit, PerturbationSet, load_graph, read_graph_file, save_graph, sbm_generate
from .losses import LossConfig, dist_loss, total_loss
from .meta import DivergenceError, FineTuneConfig, MetaConfig, train_ablation, train_meta, train_pagnn
from .model import ModelConfig, init_params, model_forward

__all__ = [
    "DimensionError", "NonFiniteError", "Tape", "Tensor", "grad",
    "Graph", "NodeSplit", "PerturbationSet", "load_graph", "read_graph_file", "save_graph", "sbm_generate",
    "LossConfig", "dist_loss", "total_loss",
    "DivergenceError", "FineTuneConfig", "MetaConfig", "train_ablation", "train_meta", "train_pagnn",
    "ModelConfig", "init_params", "model_forward",
]
