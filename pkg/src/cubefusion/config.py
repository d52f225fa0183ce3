"""Run configuration tree with YAML round-trip and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .fusion import SENSOR_IDS
from .synthetic import SceneConfig, SensorRig


def _plain(obj):
    """Recursively turn tuples into lists so YAML can represent the tree."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the fusion detector."""

    sensors: tuple[str, ...] = SENSOR_IDS
    channels: int = 16
    num_queries: int = 400
    num_heads: int = 4
    num_points: int = 4
    cycles: int = 3
    num_classes: int = 3
    dropout: float = 0.1
    ffn_multiplier: int = 4
    head_hidden: int = 64
    image_height: int = 512
    trim_margin: int = 3
    query_seed: int = 0
    class_prior: float = 0.1
    camera_widths: tuple[int, int, int] = (16, 32, 64)
    camera_depths: tuple[int, int, int] = (2, 2, 2)
    radar_widths: tuple[int, int, int] = (8, 16, 32)
    radar_depths: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        self.sensors = tuple(self.sensors)
        for name in ("camera_widths", "camera_depths", "radar_widths",
                     "radar_depths"):
            setattr(self, name, tuple(getattr(self, name)))
        if not self.sensors or set(self.sensors) - set(SENSOR_IDS):
            raise ValueError(f"sensors must be a non-empty subset of {SENSOR_IDS}")
        if self.channels % 4 != 0:
            raise ValueError("channels must be divisible by 4 (positional encoding)")
        if self.channels % self.num_heads != 0:
            raise ValueError("channels must be divisible by num_heads")
        side = math.isqrt(self.num_queries)
        if side * side != self.num_queries:
            raise ValueError("num_queries must be a perfect square")
        if self.cycles < 0:
            raise ValueError("cycles must be >= 0")
        if self.head_hidden < 1:
            raise ValueError("head_hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 < self.class_prior < 1.0:
            raise ValueError("class_prior must be in (0, 1)")
        if self.image_height < 16:
            raise ValueError("image_height must be >= 16")
        if self.trim_margin < 0:
            raise ValueError("trim_margin must be >= 0")


@dataclass
class TrainConfig:
    """Optimizer schedule and training-loop bookkeeping."""

    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    weight_decay: float = 1e-2
    grad_clip_norm: float = 10.0
    seed: int = 0
    size_scale: float = 10.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size, epochs out of range")
        if self.size_scale <= 0:
            raise ValueError("size_scale must be positive")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass
class EvalConfig:
    """Metric thresholds and report options."""

    iou_thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    score_threshold: float = 0.05
    fail_modality: str | None = None

    def __post_init__(self):
        self.iou_thresholds = tuple(self.iou_thresholds)
        if not self.iou_thresholds or any(not 0 < t < 1 for t in self.iou_thresholds):
            raise ValueError("iou_thresholds must lie in (0, 1)")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError("score_threshold must be in [0, 1]")
        if self.fail_modality not in (None, "none", "camera", "radar"):
            raise ValueError("fail_modality must be none, camera or radar")


@dataclass
class DataConfig:
    """Dataset location and the generator settings used to create it."""

    root: str = "data"
    num_scenes: int = 50
    seed: int = 0
    rig: SensorRig = field(default_factory=SensorRig)
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if self.num_scenes < 0:
            raise ValueError("num_scenes must be >= 0")
        if isinstance(self.rig, dict):
            self.rig = SensorRig.from_dict(self.rig)
        if isinstance(self.scene, dict):
            self.scene = SceneConfig.from_dict(self.scene)


@dataclass
class RunConfig:
    """Top-level configuration: data, model, training, evaluation."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        for name, cls in (("data", DataConfig), ("model", ModelConfig),
                          ("training", TrainConfig), ("evaluation", EvalConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"data", "model", "training", "evaluation"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(**d)


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config root must be a mapping: {path}")
    return RunConfig.from_dict(raw)


def save_config(config: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` strings on top of a config.

    Values are parsed as YAML scalars, so `model.num_queries=100` yields an
    int and `evaluation.fail_modality=camera` a string. Keys must already
    exist; typos fail instead of silently adding fields.
    """
    tree = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key.path=value")
        dotted, raw_value = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = tree
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ValueError(f"unknown config key {dotted!r}")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ValueError(f"unknown config key {dotted!r}")
        node[keys[-1]] = yaml.safe_load(raw_value)
    return RunConfig.from_dict(tree)
