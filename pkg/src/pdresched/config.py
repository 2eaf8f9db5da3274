"""Scenario configuration: dataclasses, TOML/JSON loading and presets."""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import BetaSchedule, CostModel
from .predictor import PredictorModel
from .scheduler import SchedulerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

POLICIES = ("baseline", "rescheduling", "ours", "ours-oracle")
GOODPUT_MODES = ("mean", "p99")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    preset: str = "sharegpt"
    # a trace file overrides the synthetic preset
    trace: Optional[str] = None
    rps: float = 0.1
    arrival: str = "poisson"

    def __post_init__(self):
        if self.trace is None and self.preset not in ("sharegpt", "alpaca"):
            raise ValueError(f"workload.preset must be sharegpt or alpaca, got {self.preset!r}")
        if not self.rps > 0:
            raise ValueError("workload.rps must be > 0")
        if self.arrival not in ("poisson", "fixed-interval"):
            raise ValueError("workload.arrival must be poisson or fixed-interval")


@dataclass(frozen=True)
class ScenarioConfig:
    n_prefill: int = 1
    n_decode: int = 3
    policy: str = "ours"
    mem_capacity: int = 200_000  # tokens per decode instance
    predictor: PredictorModel = field(default_factory=PredictorModel)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    cost: CostModel = field(default_factory=CostModel)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    slo_tpot: float = 15.0  # ms
    seed: int = 0
    duration: float = 2000.0  # s of arrivals; also the variance averaging window
    goodput_mode: str = "mean"
    sample_interval: float = 100.0  # ms
    record_tokens: bool = False
    event_log: bool = False
    debug_checks: bool = False

    def __post_init__(self):
        if self.n_prefill < 1:
            raise ValueError("n_prefill must be >= 1")
        if self.n_decode < 1:
            raise ValueError("n_decode must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.mem_capacity < 1:
            raise ValueError("mem_capacity must be >= 1")
        if not self.slo_tpot > 0:
            raise ValueError("slo_tpot must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.goodput_mode not in GOODPUT_MODES:
            raise ValueError(f"goodput_mode must be one of {GOODPUT_MODES}")
        if not self.sample_interval > 0:
            raise ValueError("sample_interval must be > 0")

    @property
    def reschedules(self) -> bool:
        return self.policy != "baseline"

    @property
    def uses_prediction(self) -> bool:
        return self.policy in ("ours", "ours-oracle")

    @property
    def effective_predictor(self) -> PredictorModel:
        if self.policy == "ours-oracle":
            return dataclasses.replace(self.predictor, kind="oracle")
        return self.predictor

    @property
    def effective_scheduler(self) -> SchedulerConfig:
        return dataclasses.replace(self.scheduler, use_prediction=self.uses_prediction)

    def with_policy(self, policy: str) -> "ScenarioConfig":
        return dataclasses.replace(self, policy=policy)


_NESTED = {
    ScenarioConfig: {"predictor": PredictorModel, "scheduler": SchedulerConfig,
                     "cost": CostModel, "workload": WorkloadConfig},
    SchedulerConfig: {"beta": BetaSchedule},
}

_CASTS = {"int": int, "float": float, "bool": bool, "str": str,
          "Optional[int]": int, "Optional[float]": float, "Optional[str]": str}


def _coerce(value, type_name: str, where: str):
    if value is None:
        if type_name.startswith("Optional"):
            return None
        raise ConfigError(f"{where}: must not be null")
    cast = _CASTS.get(type_name)
    if cast is None:
        return value
    if cast is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if cast in (int, float) and isinstance(value, bool):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if cast is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if cast is str and not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: cannot convert {value!r} to {cast.__name__}") from None


def build(cls, data: dict, prefix: str = ""):
    """Construct ``cls`` from a plain mapping, reporting errors by field path."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a table/object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    nested = _NESTED.get(cls, {})
    kwargs = {}
    for key, value in data.items():
        where = prefix + key
        if key not in known:
            raise ConfigError(f"{where}: unknown field")
        if key in nested:
            kwargs[key] = build(nested[key], value, where + ".")
        else:
            kwargs[key] = _coerce(value, str(known[key].type), where)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(_qualify(str(exc), prefix)) from None


def _qualify(msg: str, prefix: str) -> str:
    # nested classes name their own fields ("beta.horizon ..."); prepend the parents
    if not prefix:
        return msg
    last = prefix[:-1].rsplit(".", 1)[-1]
    if msg.startswith(last + "."):
        return prefix[: -len(last) - 1] + msg
    return prefix + msg


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode())
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: parse error: {exc}") from None
    if isinstance(data, dict) and "slo_tpot" not in data:
        raise ConfigError("slo_tpot: required field is missing")
    cfg = build(ScenarioConfig, data)
    if cfg.workload.trace is not None and not Path(cfg.workload.trace).is_absolute():
        resolved = str((path.parent / cfg.workload.trace).resolve())
        cfg = dataclasses.replace(cfg, workload=dataclasses.replace(cfg.workload, trace=resolved))
    return cfg


def preset(name: str) -> ScenarioConfig:
    """Named scenarios. ``sharegpt``: 1 prefill + 3 decode at 0.1 RPS."""
    if name == "sharegpt":
        return ScenarioConfig()
    if name == "alpaca":
        return ScenarioConfig(workload=WorkloadConfig(preset="alpaca"))
    raise ConfigError(f"unknown preset {name!r}")
