"""Experiment configuration shared by the CLI subcommands."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ConfigError
from .plants import PhParams, PhPlant, SurrogatePlant
from .signals import MprsConfig
from .training import ModelSpec, PenaltyConfig, TrainConfig

SCHEMA_VERSION = 1

DEFAULT_LEVELS = tuple(float(v) for v in np.linspace(-2.0, 2.0, 9))


@dataclass
class PlantConfig:
    name: str = "surrogate"
    param_file: Optional[str] = None  # pH plant only
    sampling_time: float = 10.0
    inner_step: Optional[float] = None


@dataclass
class ExcitationConfig:
    levels: tuple = DEFAULT_LEVELS
    hold_min: int = 10
    hold_max: int = 50
    length: int = 1250


@dataclass
class DatasetConfig:
    n_train: int = 10
    n_val: int = 3
    n_test: int = 1
    noise_rel: float = 0.01
    noise_std: Optional[list] = None  # [input_std, output_std]; overrides noise_rel


@dataclass
class EvalConfig:
    washout: int = 20
    domain: str = "physical"


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/experiment"
    plant: PlantConfig = field(default_factory=PlantConfig)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: Optional[TrainConfig] = None  # train.seed null/absent -> master seed
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.train is None:
            self.train = TrainConfig(seed=self.seed)

    def to_dict(self):
        d = {"schema_version": SCHEMA_VERSION, "kind": "nnarx-experiment"}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
        d["excitation"]["levels"] = list(self.excitation.levels)
        d["model"]["widths"] = list(self.model.widths)
        d["model"]["activations"] = list(self.model.activations)
        if self.train.seed == self.seed:
            d["train"]["seed"] = None  # follows the master seed
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("kind", "nnarx-experiment") != "nnarx-experiment":
            raise ConfigError("not an experiment configuration")
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {unknown}")
        try:
            kwargs = {k: d[k] for k in ("seed", "output_dir") if k in d}
            sections = {"plant": PlantConfig, "excitation": ExcitationConfig, "dataset": DatasetConfig,
                        "model": ModelSpec, "eval": EvalConfig}
            for name, typ in sections.items():
                if name in d:
                    kwargs[name] = typ(**d[name])
            if "excitation" in kwargs:
                kwargs["excitation"].levels = tuple(float(v) for v in kwargs["excitation"].levels)
            if "train" in d:
                t = dict(d["train"])
                if t.get("seed") is None:
                    t["seed"] = kwargs.get("seed", 0)
                if isinstance(t.get("penalty"), dict):
                    t["penalty"] = PenaltyConfig(**t["penalty"])
                kwargs["train"] = TrainConfig(**t)
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cls(**kwargs)

    def with_train(self, **changes):
        values = asdict(self.train)
        values["penalty"] = self.train.penalty
        values.update(changes)
        self.train = TrainConfig(**values)
        return self


def load_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def make_plant(cfg: PlantConfig, base_dir="."):
    if cfg.name == "surrogate":
        return SurrogatePlant()
    if cfg.name == "ph":
        if cfg.param_file is None:
            raise ConfigError("the pH plant needs 'param_file' with the benchmark constants")
        path = Path(cfg.param_file)
        if not path.is_absolute():
            path = Path(base_dir) / path
        return PhPlant(PhParams.from_file(path), cfg.sampling_time, cfg.inner_step)
    raise ConfigError(f"unknown plant {cfg.name!r}; choose 'surrogate' or 'ph'")


def make_excitation(cfg: ExcitationConfig):
    return MprsConfig(levels=cfg.levels, hold_min=cfg.hold_min, hold_max=cfg.hold_max, length=cfg.length)
