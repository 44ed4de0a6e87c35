"""Experiment configuration read from a JSON document."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .experiment import METHODS, AttackSpec, ScenarioConfig, TrainingConfig
from .losses import LossConfig
from .meta import FineTuneConfig, MetaConfig
from .model import ModelConfig


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    lam_grid: tuple[float, ...] = (0.0, 1.0, 10.0, 100.0, 1000.0)
    eta_grid: tuple[float, ...] = (0.0, 50.0, 100.0, 200.0, 400.0, 800.0)
    seeds: tuple[int, ...] = tuple(range(10))
    methods: tuple[str, ...] = ("pagnn", "np", "vanilla")
    graphs: dict = field(default_factory=dict)  # optional {"data": dir} of generated/attacked files
    histogram_bins: int = 20

    def __post_init__(self):
        for name in ("lam_grid", "eta_grid", "seeds", "methods"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; expected a subset of {list(METHODS)}")
        if self.histogram_bins < 1:
            raise ConfigError("histogram_bins must be positive")
        for key, path in self.graphs.items():
            if not Path(path).exists():
                raise ConfigError(f"graphs.{key}: path {path!r} does not exist")

    def as_document(self) -> dict:
        return asdict(self)


def _build(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def parse_config(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be an object")
    top = {"scenario", "attack", "model", "loss", "meta", "finetune", "preprocess_threshold", "lam_grid",
           "eta_grid", "seeds", "methods", "graphs", "histogram_bins"}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    training = TrainingConfig(
        model=_build(ModelConfig, doc.get("model"), "model"),
        loss=_build(LossConfig, doc.get("loss"), "loss"),
        meta=_build(MetaConfig, doc.get("meta"), "meta"),
        finetune=_build(FineTuneConfig, doc.get("finetune"), "finetune"),
        preprocess_threshold=float(doc.get("preprocess_threshold", 0.0)),
    )
    rest = {k: doc[k] for k in ("lam_grid", "eta_grid", "seeds", "methods", "graphs", "histogram_bins") if k in doc}
    try:
        return ExperimentConfig(
            scenario=_build(ScenarioConfig, doc.get("scenario"), "scenario"),
            attack=_build(AttackSpec, doc.get("attack"), "attack"),
            training=training,
            **{k: tuple(v) if isinstance(v, list) else v for k, v in rest.items()},
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: line {err.lineno} column {err.colno}: {err.msg}") from err
    return parse_config(doc)
