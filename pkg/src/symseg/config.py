"""JSON run configuration: strict parsing into the per-module dataclasses.

Unknown keys are rejected at every level and the top-level seed is
mandatory; everything else falls back to the dataclass defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .backbone import BackboneConfig
from .channel import ChannelConfig
from .synthdata import GenerateSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending key."""


@dataclass
class AnalysisConfig:
    min_count: int = 5
    max_k: int = 2
    min_coverage: float = 0.5
    min_purity: float = 0.9

    def validate(self) -> None:
        if self.min_count < 1:
            raise ValueError("min_count must be >= 1")
        if self.max_k < 1:
            raise ValueError("max_k must be >= 1")
        if not 0.0 < self.min_coverage <= 1.0:
            raise ValueError("min_coverage must be in (0, 1]")
        if not 0.0 <= self.min_purity <= 1.0:
            raise ValueError("min_purity must be in [0, 1]")


@dataclass
class RunConfig:
    seed: int
    data: GenerateSpec = field(default_factory=GenerateSpec)
    n_samples: int = 250
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)


_TUPLE_FIELDS = {"image_size", "input_size", "area_range", "ecc_range", "adam_betas"}


def _build(cls, obj: dict[str, Any], path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown key {unknown[0]!r}")
    kwargs = {}
    for name, value in obj.items():
        if name in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise ConfigError(f"{path}.{name}: expected a pair")
            value = tuple(value)
        kwargs[name] = value
    try:
        instance = cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return instance


def parse_run_config(obj: dict[str, Any]) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    known = {"seed", "data", "n_samples", "backbone", "channel", "train", "analysis"}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"config: unknown key {unknown[0]!r}")
    if "seed" not in obj:
        raise ConfigError("config: 'seed' is mandatory")
    seed = obj["seed"]
    if not isinstance(seed, int):
        raise ConfigError("config: 'seed' must be an integer")

    cfg = RunConfig(
        seed=seed,
        data=_build(GenerateSpec, obj.get("data", {}), "data"),
        backbone=_build(BackboneConfig, obj.get("backbone", {}), "backbone"),
        channel=_build(ChannelConfig, obj.get("channel", {}), "channel"),
        train=_build(TrainConfig, obj.get("train", {}), "train"),
        analysis=_build(AnalysisConfig, obj.get("analysis", {}), "analysis"),
    )
    n_samples = obj.get("n_samples", 250)
    if not isinstance(n_samples, int) or n_samples < 0:
        raise ConfigError("config: 'n_samples' must be a non-negative integer")
    cfg.n_samples = n_samples
    cfg.train.seed = seed

    try:
        cfg.data.validate()
        cfg.backbone.validate()
        cfg.channel.validate()
        cfg.train.validate()
        cfg.analysis.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg.data.image_size != cfg.backbone.input_size:
        raise ConfigError(
            f"data.image_size {cfg.data.image_size} != backbone.input_size "
            f"{cfg.backbone.input_size}"
        )
    return cfg


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fp:
            obj = json.load(fp)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_run_config(obj)
