"""Command-line harness: generate, attack, train, evaluate, sweep, export-attention."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from .attacks import AttackError
from .config import ConfigError, ExperimentConfig, load_config
from .graph import GraphLoadError, NodeSplit, read_graph_file, save_graph
from .losses import LossConfig
from .meta import DivergenceError
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger("pagnn")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _budget_tag(budget: float) -> str:
    return f"{int(round(budget * 100)):02d}"


# ----------------------------------------------------------------------------
# file layout of the generate/attack/train chain

def _write_splits(path: Path, scenario: ex.Scenario) -> None:
    doc = {
        "train": scenario.split.train.tolist(),
        "validation": scenario.split.validation.tolist(),
        "test": scenario.split.test.tolist(),
        "pools": [pool.tolist() for _, pool in scenario.clean],
    }
    ex.write_text(path, json.dumps(doc, separators=(",", ":")) + "\n")


def _read_splits(path: Path) -> tuple[NodeSplit, list[np.ndarray]]:
    if not path.exists():
        raise ConfigError(f"split file {str(path)!r} does not exist; run generate first")
    doc = json.loads(path.read_text(encoding="utf-8"))
    split = NodeSplit(*(np.array(doc[k], dtype=np.int64) for k in ("train", "validation", "test")))
    return split, [np.array(p, dtype=np.int64) for p in doc["pools"]]


def _read_graph(path: Path):
    if not path.exists():
        raise ConfigError(f"graph file {str(path)!r} does not exist")
    return read_graph_file(path)


def _data_dir(args, config: ExperimentConfig) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    return Path(config.graphs.get("data", args.out))


# ----------------------------------------------------------------------------
# commands

def cmd_generate(args, config: ExperimentConfig) -> int:
    out = Path(args.out)
    scenario = ex.build_scenario(config.scenario, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(scenario.target, out / "target.json")
    for i, (graph, _) in enumerate(scenario.clean):
        save_graph(graph, out / f"clean_{i}.json")
    _write_splits(out / "splits.json", scenario)
    log.info("wrote target and %d clean graphs to %s", len(scenario.clean), out)
    return EXIT_OK


def cmd_attack(args, config: ExperimentConfig) -> int:
    data, out = _data_dir(args, config), Path(args.out) / "attacked"
    split, pools = _read_splits(data / "splits.json")
    target, _ = _read_graph(data / "target.json")
    clean = [_read_graph(data / f"clean_{i}.json")[0] for i in range(len(pools))]
    spec = config.attack
    budgets = [args.budget] if args.budget is not None else list(spec.budgets)
    out.mkdir(parents=True, exist_ok=True)
    for budget in budgets:
        tag = _budget_tag(budget)
        seeds = ex.derive_seeds(args.seed + 7919, 2 + len(clean))
        res = ex.run_attack(target, spec, budget, seeds[0], train_nodes=split.train)
        res.save(out / f"target_{tag}.json", out / f"target_{tag}.log.csv")
        task_budget = budget if spec.task_budget is None else spec.task_budget
        for i, (graph, pool) in enumerate(zip(clean, pools)):
            r = ex.run_attack(graph, spec, task_budget, seeds[2 + i], train_nodes=pool)
            r.save(out / f"clean_{i}_{tag}.json", out / f"clean_{i}_{tag}.log.csv")
        log.info("budget %s%%: %d target perturbations", tag, len(res.perturbations))
    return EXIT_OK


def _loss_override(args, config: ExperimentConfig, method: str) -> LossConfig:
    overrides = {k: getattr(args, k) for k in ("lam", "eta") if getattr(args, k, None) is not None}
    if method == "np" and "lam" in overrides:
        raise ConfigError("method np fixes lam=0; drop the --lam override")
    loss = replace(config.training.loss, **overrides)
    return replace(loss, lam=0.0) if method == "np" else loss


def cmd_train(args, config: ExperimentConfig) -> int:
    method = args.method
    loss = _loss_override(args, config, method)
    training = replace(config.training, loss=loss)
    data = _data_dir(args, config)
    attacked = data / "attacked"
    tag = _budget_tag(args.budget)
    split, pools = _read_splits(data / "splits.json")
    target, target_ptb = _read_graph(attacked / f"target_{tag}.json")
    tasks, second = [], None
    if method in ("pagnn", "np", "ft", "jt"):
        clean = []
        for i, pool in enumerate(pools):
            path = attacked / f"clean_{i}_{tag}.json"
            graph, ptb = _read_graph(path)
            if ptb is None:
                raise ConfigError(f"{path}: method {method} needs the perturbed_edges sidecar")
            clean.append((graph, ptb, pool))
        tasks = ex.make_tasks(clean, training)
    if method == "second_time":
        s_second = ex.derive_seeds(args.seed + 7919, 2)[1]
        second = ex.run_attack(target, config.attack, max(args.budget, 0.05), s_second, train_nodes=split.train)
    trained = ex.run_method(method, target, split, training, ex.derive_seeds(args.seed + 104729, 1)[0],
                            tasks=tasks, target_perturbations=target_ptb, second_attack=second)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained.params, out / f"{method}_{tag}.ckpt.json", training.model)
    trained.log.to_csv(out / f"{method}_{tag}.log.csv", include_seconds=args.timings)
    if method in ("second_time", "preprocess_baseline"):
        save_graph(trained.graph, out / f"{method}_{tag}.graph.json", trained.perturbations)
    report = ex.evaluate(trained.params, trained.graph, split.test, training.model, trained.perturbations,
                         loss.eta)
    ex.write_text(out / f"{method}_{tag}.metrics.json", json.dumps(report, sort_keys=True, indent=1) + "\n")
    log.info("%s at %s%%: test accuracy %.4f", method, tag, report["accuracy"])
    return EXIT_OK


def cmd_evaluate(args, config: ExperimentConfig) -> int:
    params, model_config = load_checkpoint(args.checkpoint)
    graph, ptb = _read_graph(Path(args.graph))
    split, _ = _read_splits(Path(args.splits))
    report = ex.evaluate(params, graph, split.test, model_config or config.training.model, ptb,
                         config.training.loss.eta)
    text = json.dumps(report, sort_keys=True, indent=1) + "\n"
    ex.write_text(Path(args.out) / "evaluation.json", text)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def sweep_cells(config: ExperimentConfig, seeds, budgets) -> list[ex.CellSpec]:
    """Cartesian product of seeds, budgets, methods and the loss grids.

    Methods that never use the penalty get one cell per (seed, budget) with
    ``lam = 0``.
    """
    cells = []
    for seed in seeds:
        for budget in budgets:
            for method in config.methods:
                if method in ("np", "vanilla", "preprocess_baseline"):
                    cells.append(ex.CellSpec(seed, budget, method, 0.0, config.eta_grid[0]))
                    continue
                for lam in config.lam_grid:
                    for eta in config.eta_grid:
                        cells.append(ex.CellSpec(seed, budget, method, lam, eta))
    return cells


def _cell_worker(payload):
    cell, scenario, attack, training = payload
    return ex.run_cell(cell, scenario, attack, training)


def run_sweep(config: ExperimentConfig, cells, workers: int = 1) -> list[dict]:
    payloads = [(c, config.scenario, config.attack, config.training) for c in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_cell_worker, payloads))
    rows = []
    for p in payloads:
        rows.append(_cell_worker(p))
        log.info("seed %d budget %s %s lam=%g eta=%g: accuracy %.4f", p[0].seed, p[0].budget, p[0].method,
                 p[0].lam, p[0].eta, rows[-1]["accuracy"])
    return rows


def cmd_sweep(args, config: ExperimentConfig) -> int:
    seeds = config.seeds if args.seed is None else tuple(range(args.seed, args.seed + len(config.seeds)))
    budgets = [args.budget] if args.budget is not None else list(config.attack.budgets)
    rows = run_sweep(config, sweep_cells(config, seeds, budgets), args.workers)
    out = Path(args.out)
    ex.write_text(out / "metrics.csv", ex.metrics_csv(rows))
    ex.write_text(out / "summary.json", ex.summary_json(rows, config.as_document()))
    log.info("wrote %d rows to %s", len(rows), out)
    return EXIT_OK


def cmd_export_attention(args, config: ExperimentConfig) -> int:
    params, model_config = load_checkpoint(args.checkpoint)
    graph, ptb = _read_graph(Path(args.graph))
    if ptb is None:
        raise ConfigError(f"{args.graph}: export-attention needs the perturbed_edges field")
    model_config = model_config or config.training.model
    edges, normal, perturbed = ex.attention_histogram(params, graph, ptb, model_config, config.histogram_bins)
    out = Path(args.out)
    ex.write_text(out / "attention_histogram.csv", ex.histogram_csv(edges, normal, perturbed))
    ex.write_text(out / "attention_means.csv", ex.attention_means_table(params, graph, ptb, model_config))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "attack": cmd_attack,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "export-attention": cmd_export_attention,
}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="base seed (sweep: first of the seed range)")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--workers", type=int, help="parallel sweep cells (default: 1)")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = _Parser(prog="pagnn", description="Penalized-attention GNN experiments", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="sample the SBM parent graph and split it")

    p = sub.add_parser("attack", parents=[common], help="poison target and clean graphs at each budget")
    p.add_argument("--data", help="directory written by generate (default: --out)")
    p.add_argument("--budget", type=float, help="single budget instead of the configured grid")

    p = sub.add_parser("train", parents=[common], help="train one method on the poisoned target")
    p.add_argument("--method", required=True, choices=ex.METHODS)
    p.add_argument("--budget", type=float, required=True, help="budget of the attacked files to use")
    p.add_argument("--data", help="directory written by generate and attack (default: --out)")
    p.add_argument("--lam", type=float, help="override the penalty weight")
    p.add_argument("--eta", type=float, help="override the penalty margin")
    p.add_argument("--timings", action="store_true", help="keep the wall-clock column in the training log")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a graph's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--splits", required=True, help="splits.json written by generate")

    p = sub.add_parser("sweep", parents=[common], help="grid of seeds x budgets x methods x (lam, eta)")
    p.add_argument("--budget", type=float, help="single budget instead of the configured grid")

    p = sub.add_parser("export-attention", parents=[common], help="attention histograms for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True, help="poisoned graph file carrying perturbed_edges")
    return parser


_GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": "out", "workers": 1, "quiet": False}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        for key, default in _GLOBAL_DEFAULTS.items():
            if getattr(args, key, None) is None:
                setattr(args, key, default)
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(message)s", stream=sys.stderr, force=True)
        config = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is None and args.command != "sweep":
            args.seed = 0
        return COMMANDS[args.command](args, config)
    except (UsageError, ConfigError, GraphLoadError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, AttackError, RuntimeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
