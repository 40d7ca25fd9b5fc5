"""Experiment configuration: nested dataclasses with strict JSON load/save."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .detector import FUSIONS, ModelConfig
from .phantom import PhantomConfig
from .training.loop import TrainConfig
from .training.losses import LossWeights

MODES = ("2d", "3d", "slicewise", "mip")


class ConfigError(ValueError):
    """Invalid configuration (unknown key, bad type or out-of-range value)."""


@dataclass
class ModelSection:
    n_proposals: int = 8
    dim: int = 32
    pool: int = 3
    n_heads: int = 6
    attn_heads: int = 4
    backbone_width: int = 16
    s_target: int = 16
    fusion: str = "weighted"
    mode: str = "3d"

    def validate(self) -> "ModelSection":
        if self.mode not in MODES:
            raise ConfigError(f"model.mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"model.fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.s_target < 1:
            raise ConfigError("model.s_target must be >= 1")
        return self

    def model_config(self, image_size: tuple[int, int], fusion: Optional[str] = None) -> ModelConfig:
        return ModelConfig(n_proposals=self.n_proposals, dim=self.dim, pool=self.pool,
                           n_heads=self.n_heads, attn_heads=self.attn_heads,
                           backbone_width=self.backbone_width, image_size=image_size,
                           fusion=fusion or self.fusion, n_slices=self.s_target).validate()


@dataclass
class DataSection:
    split_sizes: tuple[int, int, int] = (600, 100, 200)
    base_seed: int = 0
    split_seed: int = 1

    def __post_init__(self):
        self.split_sizes = tuple(self.split_sizes)

    @property
    def n_cases(self) -> int:
        return sum(self.split_sizes)

    @property
    def fractions(self) -> tuple[float, ...]:
        return tuple(n / self.n_cases for n in self.split_sizes)

    def validate(self) -> "DataSection":
        if len(self.split_sizes) != 3 or min(self.split_sizes) < 1:
            raise ConfigError("data.split_sizes must be three positive counts (train, val, test)")
        if self.base_seed < 0 or self.split_seed < 0:
            raise ConfigError("seeds must be nonnegative")
        return self


@dataclass
class PretrainSection:
    """2D stand-in for FFDM pretraining: a separate, fully annotated phantom set."""
    enabled: bool = True
    n_cases: int = 1000
    base_seed: int = 1_000_000
    epochs: int = 12
    lr: float = 1e-3

    def validate(self) -> "PretrainSection":
        if self.n_cases < 1 or self.epochs < 0 or not self.lr > 0:
            raise ConfigError("pretrain needs n_cases >= 1, epochs >= 0, lr > 0")
        return self


@dataclass
class EvalSection:
    xs: tuple[float, ...] = (0.25, 0.5)
    bootstrap: int = 200
    restrict_fp_to_nonbenign: bool = False
    nms_iou: float = 0.5

    def __post_init__(self):
        self.xs = tuple(self.xs)

    def validate(self) -> "EvalSection":
        if not self.xs or any(x <= 0 for x in self.xs):
            raise ConfigError("eval.xs must be positive false-positive rates")
        if self.bootstrap < 100:
            raise ConfigError("eval.bootstrap must be >= 100")
        if not 0 < self.nms_iou <= 1:
            raise ConfigError("eval.nms_iou must be in (0, 1]")
        return self


@dataclass
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)
    seed: int = 0
    data_fraction: float = 1.0
    annotation_fraction: float = 0.4

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.phantom.height, self.phantom.width)

    def model_config(self, fusion: Optional[str] = None) -> ModelConfig:
        return self.model.model_config(self.image_size, fusion)

    def validate(self) -> "ExperimentConfig":
        for section in (self.model, self.pretrain, self.eval, self.data):
            section.validate()
        try:
            self.phantom.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not 0 < self.data_fraction <= 1:
            raise ConfigError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if not 0 <= self.annotation_fraction <= 1:
            raise ConfigError(f"annotation_fraction must be in [0, 1], got {self.annotation_fraction}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"train.epochs": 3})``."""
        d = self.to_dict()
        for key, value in changes.items():
            *path, last = key.split(".")
            node = d
            for p in path:
                node = node[p]
            if last not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[last] = value
        return from_dict(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {"model": ModelSection, "phantom": PhantomConfig, "train": TrainConfig,
             "pretrain": PretrainSection, "eval": EvalSection, "data": DataSection}


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in d.items():
        if cls is TrainConfig and k == "weights":
            v = _build(LossWeights, v, f"{where}.weights")
        elif isinstance(v, bool) != isinstance(getattr(cls(), k), bool):
            raise ConfigError(f"{where}.{k}: boolean/number mismatch")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for k, v in d.items():
        kwargs[k] = _build(_SECTIONS[k], v, k) if k in _SECTIONS else v
    for k in ("seed",):
        if k in kwargs and (isinstance(kwargs[k], bool) or not isinstance(kwargs[k], int)):
            raise ConfigError(f"{k} must be an integer")
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return from_dict(d)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_json())
