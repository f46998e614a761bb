"""Run configuration: one JSON document, strict keys, module defaults."""
from __future__ import annotations

import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

from .adapt import TrainConfig
from .losses import ThclConfig
from .policy import LAYERS
from .simenv import SimConfig, SuccessConfig, style_from_dict


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSection:
    d_sem: int = 768
    d_spa: int = 256
    grid_sem: int = 8
    grid_spa: int = 16
    bias_scale: float = 0.0

    def __post_init__(self):
        if min(self.d_sem, self.d_spa) < 1 or self.bias_scale < 0:
            raise ConfigError("encoder dims must be >= 1 and bias_scale >= 0")
        for g in (self.grid_sem, self.grid_spa):
            if g < 1 or 224 % g:
                raise ConfigError(f"pooling grid {g} must divide 224")


@dataclass(frozen=True)
class MemorySection:
    success_capacity: int = 50
    failure_capacity: int = 50
    decay_lambda: float = 0.1

    def __post_init__(self):
        if min(self.success_capacity, self.failure_capacity) < 1:
            raise ConfigError("buffer capacities must be >= 1")
        if self.decay_lambda < 0:
            raise ConfigError("decay_lambda must be >= 0")


@dataclass(frozen=True)
class RetrievalSection:
    max_k: int = 5
    k_divisor: int = 10
    n_positives: int = 3
    n_negatives: int = 2

    def __post_init__(self):
        if self.max_k < 1 or self.k_divisor < 1 or min(self.n_positives, self.n_negatives) < 0:
            raise ConfigError("retrieval sizes must be positive")


@dataclass(frozen=True)
class PolicySection:
    d_c: int = 16
    hidden: int = 64
    d_h: int = 64
    rank: int = 4
    adapted: tuple = ("hidden",)
    lora_init_std: float = 0.01
    action_scale: tuple = (0.1, 0.1, 0.1, 1.0, 1.0, 1.0, 4.0)

    def __post_init__(self):
        if min(self.d_c, self.hidden, self.d_h, self.rank) < 1:
            raise ConfigError("policy dims and rank must be >= 1")
        if not set(self.adapted) <= set(LAYERS):
            raise ConfigError(f"adapted layers must be among {LAYERS}")
        if len(self.action_scale) != 7 or not all(
                isinstance(v, (int, float)) and v > 0 for v in self.action_scale):
            raise ConfigError("action_scale must be 7 positive numbers")


@dataclass(frozen=True)
class TriggerSection:
    window: int = 10
    threshold: float = 0.8

    def __post_init__(self):
        if self.window < 1 or not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("trigger window must be >= 1 and threshold in [0, 1]")


@dataclass(frozen=True)
class ScenarioSection:
    n_tasks: int = 4
    target_geometry: str = "shared"
    commands: tuple = ((101, 7, 33, 12),)
    jitter: float = 0.01
    pretrain_demos: int = 160
    pretrain_epochs: int = 300
    pretrain_lr: float = 3e-3
    preload_episodes: int = 50
    deploy_episodes: int = 120
    max_cycles: int = 10
    eval_episodes: int = 40
    chunk: Optional[int] = None
    horizon: Optional[int] = None
    corrections: bool = True
    source_style: Optional[dict] = None
    target_style: Optional[dict] = None
    # dynamics shift on the target robot: yaw of its actuator frame, degrees
    target_actuator_yaw_deg: float = 0.0
    # the naive baseline trains every base weight, so it gets its own rate
    naive_learning_rate: Optional[float] = None

    def __post_init__(self):
        if self.target_geometry not in ("shared", "new"):
            raise ConfigError("target_geometry must be 'shared' or 'new'")
        for name in ("n_tasks", "pretrain_demos", "eval_episodes", "max_cycles"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if min(self.preload_episodes, self.deploy_episodes, self.pretrain_epochs) < 0:
            raise ConfigError("episode and epoch counts must be >= 0")
        if self.naive_learning_rate is not None and not self.naive_learning_rate > 0:
            raise ConfigError("naive_learning_rate must be > 0")
        for style in (self.source_style, self.target_style):
            if style is not None:
                try:
                    style_from_dict(style)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad visual style: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    memory_budget_mb: float = 1.0
    forgetting_epsilon: float = 1.0
    encoder: EncoderSection = field(default_factory=EncoderSection)
    memory: MemorySection = field(default_factory=MemorySection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    thcl: ThclConfig = field(default_factory=ThclConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicySection = field(default_factory=PolicySection)
    success: SuccessConfig = field(default_factory=SuccessConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    trigger: TriggerSection = field(default_factory=TriggerSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


def _coerce(value, hint, where: str):
    origin = get_origin(hint)
    if origin is Union:
        if value is None:
            return None
        hint = next(a for a in get_args(hint) if a is not type(None))
        origin = get_origin(hint)
    bad = ConfigError(f"{where}: expected {getattr(hint, '__name__', hint)}, got {value!r}")
    if hint is bool:
        if not isinstance(value, bool):
            raise bad
    elif hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
    elif hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise bad
        return float(value)
    elif hint is str:
        if not isinstance(value, str):
            raise bad
    elif hint is dict:
        if not isinstance(value, dict):
            raise bad
    elif hint is tuple or origin is tuple:
        if not isinstance(value, list):
            raise bad
        return _tupleize(value)
    return value


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = get_type_hints(cls, vars(sys.modules[cls.__module__]))
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        sub = default() if default is not None else None
        path = f"{where}.{name}".lstrip(".")
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, path)
        else:
            kwargs[name] = _coerce(value, hints[name], path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(data)


def bundled_config_path(name: str = "two_domain_baseline.json") -> Path:
    return Path(__file__).parent / "data" / name
