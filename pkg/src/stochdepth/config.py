"""Strictly validated experiment configuration (YAML or JSON documents)."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import AugmentConfig
from .depth import SurvivalSchedule
from .resnet import NetworkSpec
from .training import LrSchedule

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SweepGrid",
    "SweepConfig",
    "load_config",
    "load_sweep_config",
]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AugmentSection(_Strict):
    hflip: bool = False
    translate_pixels: int = Field(0, ge=0)


class SpiralData(_Strict):
    kind: Literal["spirals"] = "spirals"
    n_per_class: int = Field(100, ge=2)
    classes: int = Field(3, ge=2)
    noise: float = Field(0.1, ge=0)
    turns: float = Field(1.0, gt=0)
    test_per_class: int = Field(300, ge=1)
    val_fraction: float = Field(0.2, gt=0, lt=1)
    standardize: bool = True


class ImageCsvData(_Strict):
    kind: Literal["image_csv"]
    train_path: str
    test_path: str
    shape: tuple[int, int, int]
    num_classes: int = Field(10, ge=2)
    val_fraction: float = Field(0.1, gt=0, lt=1)
    standardize: bool = True
    augment: AugmentSection = AugmentSection()

    @model_validator(mode="after")
    def _translate_fits(self):
        if self.augment.translate_pixels >= min(self.shape[1:]):
            raise ValueError("translate_pixels must be smaller than the image size")
        return self


class NetworkSection(_Strict):
    flavor: Literal["conv", "dense"] = "dense"
    groups: list[tuple[int, int]] = [(54, 32)]
    bn_momentum: float = Field(0.1, gt=0, le=1)
    bn_eps: float = Field(1e-5, gt=0)

    @field_validator("groups")
    @classmethod
    def _positive(cls, v):
        if not v or any(n < 1 or w < 1 for n, w in v):
            raise ValueError("groups must be non-empty (block_count, width) pairs of positive ints")
        return v

    @property
    def depth(self) -> int:
        return sum(n for n, _ in self.groups)


class ScheduleSection(_Strict):
    rule: Literal["uniform", "linear_decay"] = "linear_decay"
    p_L: float = Field(0.5, gt=0, le=1)
    L: Optional[int] = None


class OptimizerSection(_Strict):
    lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    nesterov: bool = True
    batch_size: int = Field(64, ge=2)


class LrSection(_Strict):
    milestones: list[int] = []
    factor: float = Field(0.1, gt=0, lt=1)
    warmup_epochs: int = Field(0, ge=0)
    warmup_lr: Optional[float] = Field(None, gt=0)


class ExperimentConfig(_Strict):
    dataset: Union[SpiralData, ImageCsvData] = Field(SpiralData(), discriminator="kind")
    network: NetworkSection = NetworkSection()
    mode: Literal["constant", "stochastic"] = "stochastic"
    schedule: ScheduleSection = ScheduleSection()
    optimizer: OptimizerSection = OptimizerSection()
    lr_schedule: LrSection = LrSection()
    epochs: int = Field(10, ge=1)
    seed: int = Field(0, ge=0)
    out_dir: str = "runs/default"

    @model_validator(mode="after")
    def _consistent(self):
        if self.schedule.L is not None and self.schedule.L != self.network.depth:
            raise ValueError(f"schedule.L={self.schedule.L} but the network has {self.network.depth} blocks")
        ms = self.lr_schedule.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("lr_schedule.milestones must be strictly increasing")
        if self.network.flavor == "conv" and self.dataset.kind != "image_csv":
            raise ValueError("conv networks need an image dataset")
        return self

    def network_spec(self, in_features: int, num_classes: int) -> NetworkSpec:
        n = self.network
        return NetworkSpec(n.flavor, in_features, tuple(n.groups), num_classes, n.bn_momentum, n.bn_eps)

    def survival_schedule(self) -> SurvivalSchedule | None:
        if self.mode == "constant":
            return None
        return SurvivalSchedule(self.schedule.rule, self.schedule.p_L, self.network.depth)

    def lr(self) -> LrSchedule:
        s = self.lr_schedule
        return LrSchedule(self.optimizer.lr, tuple(s.milestones), s.factor, s.warmup_epochs, s.warmup_lr)

    def augment(self) -> AugmentConfig | None:
        if isinstance(self.dataset, ImageCsvData):
            a = self.dataset.augment
            return AugmentConfig(a.hflip, a.translate_pixels)
        return None

    def with_updates(self, **changes) -> "ExperimentConfig":
        """Copy with nested changes given as ``section__field=value``; re-validated."""
        data = self.model_dump()
        for key, value in changes.items():
            node = data
            *path, last = key.split("__")
            for part in path:
                node = node[part]
            node[last] = value
        return ExperimentConfig.model_validate(data)

    def with_depth(self, depth: int) -> "ExperimentConfig":
        """Same architecture family with ``depth`` blocks split evenly over the groups."""
        groups = self.network.groups
        if depth % len(groups):
            raise ConfigError(f"depth {depth} not divisible by {len(groups)} groups")
        per = depth // len(groups)
        return self.with_updates(network__groups=[(per, w) for _, w in groups], schedule__L=None)


class SweepGrid(_Strict):
    p_L: list[float]
    rules: list[Literal["uniform", "linear_decay"]] = ["linear_decay"]
    depths: Optional[list[int]] = None
    seeds: list[int] = [0]

    @field_validator("p_L")
    @classmethod
    def _probs(cls, v):
        if not v or any(not 0 < p <= 1 for p in v):
            raise ValueError("p_L values must be non-empty and lie in (0, 1]")
        return v

    @field_validator("rules", "seeds")
    @classmethod
    def _non_empty(cls, v):
        if not v:
            raise ValueError("sweep axes must be non-empty")
        return v

    @field_validator("depths")
    @classmethod
    def _depths(cls, v):
        if v is not None and (not v or any(d < 1 for d in v)):
            raise ValueError("depths must be non-empty positive ints")
        return v


class SweepConfig(_Strict):
    base: ExperimentConfig
    grid: SweepGrid


def _read(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def _validate(model, doc: dict, where: str):
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    return _validate(ExperimentConfig, _read(path), str(path))


def load_sweep_config(path: str | Path) -> SweepConfig:
    return _validate(SweepConfig, _read(path), str(path))


def parse_config(doc: dict) -> ExperimentConfig:
    return _validate(ExperimentConfig, doc, "config")
