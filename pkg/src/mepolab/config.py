"""Experiment configuration: one JSON document, dataclasses underneath.

Unknown keys are rejected; unspecified keys take the defaults below (the
``defaults`` CLI subcommand prints the resolved document). The config holds
no filesystem paths, so its canonical hash identifies the experiment
independently of where artifacts land.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .mepo import AlignConfig, MepoConfig


@dataclass
class DataConfig:
    input_dim: int = 12
    center_scale: float = 1.0
    pretrain_classes: int = 30
    pretrain_samples_per_class: int = 200
    pretrain_spread: float = 0.35
    downstream_classes: int = 20
    downstream_train_per_class: int = 100
    downstream_test_per_class: int = 50
    downstream_spread: float = 0.5


@dataclass
class ModelConfig:
    hidden_dims: list[int] = field(default_factory=lambda: [32])
    feature_dim: int = 16
    activation: str = "tanh"


@dataclass
class PretrainStage:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-2
    optimizer: str = "adam"


@dataclass
class CovRefStage:
    epsilon: float = 1e-4


@dataclass
class StreamStage:
    m: float = 0.5
    n: float = 0.1
    task_count: int = 5
    batch_size: int = 64


@dataclass
class GclStage:
    lr: float = 5e-3
    optimizer: str = "adam"
    mask_policy: str = "seen"
    eval_interval_batches: int = 2


@dataclass
class AblationFlags:
    meta_rep: bool = True
    meta_cov: bool = True


@dataclass
class SweepPlan:
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5, 0.7, 1.0])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class ExperimentConfig:
    seed: int = 12345
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainStage = field(default_factory=PretrainStage)
    mepo: MepoConfig = field(default_factory=MepoConfig)
    covref: CovRefStage = field(default_factory=CovRefStage)
    stream: StreamStage = field(default_factory=StreamStage)
    align: AlignConfig = field(default_factory=AlignConfig)
    gcl: GclStage = field(default_factory=GclStage)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    sweep: SweepPlan = field(default_factory=SweepPlan)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object, got {type(payload).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in payload:
            continue
        value = payload[f.name]
        if f.name in _NESTED and cls is ExperimentConfig:
            kwargs[f.name] = _build(_NESTED[f.name], value, f"{path}.{f.name}")
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_NESTED = {
    "data": DataConfig,
    "model": ModelConfig,
    "pretrain": PretrainStage,
    "mepo": MepoConfig,
    "covref": CovRefStage,
    "stream": StreamStage,
    "align": AlignConfig,
    "gcl": GclStage,
    "ablation": AblationFlags,
    "sweep": SweepPlan,
}


def config_from_dict(payload: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, payload, "config")


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(payload)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode("utf-8")).hexdigest()
