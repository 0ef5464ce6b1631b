"""
Experiment configuration.

A config is a JSON object with the sections below; every section is optional
and fully defaulted, and unknown keys anywhere raise :class:`ConfigError`::

    {
      "seed": 0,
      "variant": "ppfn",
      "paths": {"clean_dir": "...", "output_dir": "..."},
      "data": {"train_fraction": 0.8, "eval_split": "val"},
      "degradation": {"gate_prob": 0.8, "tiers": {"normal": {...}, "hard": {...}}},
      "backbone": {...}, "prompts": {...}, "train": {...},
      "eval": {"subsets": [...], "workers": 1}
    }

The config hash covers everything except ``paths``, so moving an experiment
to another directory does not change its identity.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .degradation import DEFAULT_TIERS, TierRanges
from .evaluation import SUBSET_NAMES
from .prompts import PromptConfig
from .spt import ModelSpec, TrainConfig
from .variants import VARIANTS


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass
class PathsConfig:
    clean_dir: str = "data/clean"
    output_dir: str = "runs/experiment"


@dataclass
class DataConfig:
    train_fraction: float = 0.8
    eval_split: str = "val"  # "val", "train" or "all"

    def __post_init__(self):
        if self.eval_split not in ("val", "train", "all"):
            raise ValueError(f"eval_split must be val, train or all, got {self.eval_split!r}")


@dataclass
class DegradationConfig:
    gate_prob: float = 0.8
    tiers: dict = field(default_factory=lambda: {k: v.to_dict() for k, v in DEFAULT_TIERS.items()})

    def ranges(self) -> dict[str, TierRanges]:
        return {k: TierRanges.from_dict(v) for k, v in self.tiers.items()}


@dataclass
class EvalConfig:
    subsets: list = field(default_factory=lambda: list(SUBSET_NAMES))
    workers: int = 1

    def __post_init__(self):
        bad = set(self.subsets) - set(SUBSET_NAMES)
        if bad:
            raise ValueError(f"unknown subsets {sorted(bad)}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    variant: str = "ppfn"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    _SECTIONS = {"paths": PathsConfig, "data": DataConfig, "degradation": DegradationConfig,
                 "backbone": BackboneConfig, "prompts": PromptConfig, "train": TrainConfig,
                 "eval": EvalConfig}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {"seed", "variant"} - set(cls._SECTIONS)
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kw = {name: _strict(kind, d.get(name, {}), name) for name, kind in cls._SECTIONS.items()}
        cfg = cls(seed=int(d.get("seed", 0)), variant=d.get("variant", "ppfn"), **kw)
        if cfg.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {cfg.variant!r}")
        try:
            cfg.degradation.ranges()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid degradation tiers: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "variant": self.variant}
        for name in self._SECTIONS:
            d[name] = asdict(getattr(self, name))
        return d

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with top-level fields or whole sections replaced."""
        return replace(copy.deepcopy(self), **sections)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.variant, self.backbone, self.prompts, self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, gate_prob=self.degradation.gate_prob)

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}
