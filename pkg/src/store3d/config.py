"""Run configuration: nested dataclasses loaded from YAML with unknown-key rejection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .corridor import RelevanceConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .losses import LossConfig
from .metrics import MetricsConfig
from .pipeline import ModelConfig, default_schedules
from .sparsity import ScheduleConfig
from .training import TrainConfig


@dataclass
class BaseConfig:
    """Full-scale training hyperparameters, kept as keys for reference; desk runs ignore them."""

    learning_rate: float = 4e-4
    lr_schedule: str = "cosine"
    optimizer: str = "AdamW"
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 24
    max_detections: int = 300


@dataclass
class ScheduleSection:
    """Keep-ratio target plus optional explicit per-stream schedules.

    When `image` / `query` are omitted they follow the model's default
    layout (prune before the later global layers, reactivate at the last).
    """

    tkr: float = 1.0
    image: Optional[ScheduleConfig] = None
    query: Optional[ScheduleConfig] = None

    def resolve(self, model: ModelConfig, tkr: Optional[float] = None) -> tuple[ScheduleConfig, ScheduleConfig]:
        t = self.tkr if tkr is None else tkr
        b, d = default_schedules(t, model)
        if self.image is not None:
            b = dataclasses.replace(self.image, tkr=t)
        if self.query is not None:
            d = dataclasses.replace(self.query, tkr=t)
        return b, d


@dataclass
class CurveConfig:
    tkrs: tuple[float, ...] = (1.0, 0.5, 0.33, 0.1)
    train_scenes: int = 4
    test_scenes: int = 2
    train_seed: int = 10
    test_seed: int = 11
    # keep ratios the detection heads also see during the sparsity-aware refit
    refit_ratios: tuple[float, ...] = (0.5, 0.33, 0.1)


@dataclass
class ProfileConfig:
    shape: str = "full_scale"  # "full_scale" | "toy"
    bytes_per_element: int = 4


@dataclass
class IoConfig:
    out_dir: str = "runs"
    dataset: Optional[str] = None
    labels: Optional[str] = None
    detections: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "dense"
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    relevance: RelevanceConfig = field(default_factory=RelevanceConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    curve: CurveConfig = field(default_factory=CurveConfig)
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    base: BaseConfig = field(default_factory=BaseConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# nested dataclass type per (owner, field) where the default does not reveal it
_NESTED = {
    (ScheduleSection, "image"): ScheduleConfig,
    (ScheduleSection, "query"): ScheduleConfig,
}


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def _build(cls, data: Any, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f"{path}.{name}" if path else name
        if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            default = f.default_factory()  # type: ignore[misc]
        else:
            default = f.default
        nested = _NESTED.get((cls, name))
        if nested is None and dataclasses.is_dataclass(default):
            nested = type(default)
        if nested is not None and value is not None:
            kwargs[name] = _build(nested, value, sub)
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{sub}: expected a mapping")
            extra = sorted(set(value) - set(default))
            if extra:
                raise ConfigError(f"{sub}: unknown keys {extra}")
            kwargs[name] = {**default, **value}
        else:
            kwargs[name] = _tupleize(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def validate(cfg: RunConfig) -> RunConfig:
    """Cross-field checks that single sections cannot make on their own."""
    if cfg.mode not in ("dense", "sparse_eval", "sparse_train"):
        raise ConfigError("mode must be dense, sparse_eval or sparse_train")
    m = cfg.model
    for name, sched, depth in (("image", cfg.schedule.image, m.backbone_layers), ("query", cfg.schedule.query, m.decoder_layers)):
        if sched is not None and sched.total_layers != depth:
            raise ConfigError(f"schedule.{name}.total_layers={sched.total_layers} but the model has {depth} layers")
    if not 0 < cfg.schedule.tkr <= 1:
        raise ConfigError("schedule.tkr must lie in (0, 1]")
    if any(not 0 < t <= 1 for t in cfg.curve.tkrs) or not cfg.curve.tkrs:
        raise ConfigError("curve.tkrs must lie in (0, 1]")
    if cfg.profile.shape not in ("full_scale", "toy"):
        raise ConfigError("profile.shape must be 'full_scale' or 'toy'")
    if cfg.profile.bytes_per_element <= 0:
        raise ConfigError("profile.bytes_per_element must be positive")
    unknown = sorted(set(cfg.metrics.classes) - set(m.classes))
    if unknown:
        raise ConfigError(f"metrics.classes {unknown} are not predicted by the model")
    w0, w1 = cfg.train.warmup
    if w0 > w1:
        raise ConfigError("train.warmup start must not exceed end")
    return cfg


def from_dict(data: Optional[dict]) -> RunConfig:
    return validate(_build(RunConfig, data or {}, ""))


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return from_dict({})
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: invalid YAML: {e}") from e
    return from_dict(data)
