"""Cluster configuration: one YAML document mapped onto typed sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from ..core_model import HyperParams, ModelSchema
from ..errors import ConfigError
from ..master import GatherConfig
from ..monitor import TriggerConfig, VersionStrategy
from ..scheduler import FaultToleranceConfig
from .workload import WorkloadSpec


@dataclass
class ClusterSection:
    num_masters: int = 1
    num_slaves: int = 1
    replicas: int = 1
    min_replicas: Optional[int] = None
    num_partitions: int = 1
    mode: str = "single-process"
    clock: str = "wall"
    collector_bound: int = 1 << 20

    def __post_init__(self):
        for name in ("num_masters", "num_slaves", "replicas", "num_partitions"):
            if getattr(self, name) < 1:
                raise ValueError(f"cluster.{name} must be >= 1")
        if self.min_replicas is None:
            self.min_replicas = self.replicas
        if not 1 <= self.min_replicas <= self.replicas:
            raise ValueError("cluster.min_replicas must lie in 1..replicas")
        if self.mode not in ("single-process", "multi-process"):
            raise ValueError(f"unknown cluster.mode {self.mode!r}")
        if self.clock not in ("wall", "logical"):
            raise ValueError(f"unknown cluster.clock {self.clock!r}")


@dataclass
class LogSection:
    backend: str = "memory"
    dir: Optional[str] = None
    compress: bool = True
    fsync: bool = False

    def __post_init__(self):
        if self.backend not in ("memory", "file"):
            raise ValueError(f"unknown log.backend {self.backend!r}")


@dataclass
class CheckpointSection:
    dir: Optional[str] = None
    remote_dir: Optional[str] = None


@dataclass
class SchedulerSection:
    probe_interval: float = 0.5
    miss_threshold: int = 3
    jitter_fraction: float = 0.2
    auto_failover: bool = True
    auto_downgrade: bool = False
    downgrade_hold: bool = True

    def __post_init__(self):
        if not self.probe_interval > 0 or self.miss_threshold < 1:
            raise ValueError("scheduler probe_interval must be > 0 and miss_threshold >= 1")
        if not 0 <= self.jitter_fraction <= 1:
            raise ValueError("scheduler.jitter_fraction must lie in [0, 1]")


@dataclass
class TrainerSection:
    num_trainers: int = 1
    batch_size: int = 1000

    def __post_init__(self):
        if self.num_trainers < 1 or self.batch_size < 1:
            raise ValueError("trainer counts must be >= 1")


@dataclass
class Config:
    model_id: str = "ctr"
    schema: str = "LR_FTRL"
    hyperparams: HyperParams = field(default_factory=HyperParams)
    cluster: ClusterSection = field(default_factory=ClusterSection)
    log: LogSection = field(default_factory=LogSection)
    checkpoint: CheckpointSection = field(default_factory=CheckpointSection)
    sync: GatherConfig = field(default_factory=GatherConfig)
    fault_tolerance: FaultToleranceConfig = field(default_factory=FaultToleranceConfig)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    strategy: VersionStrategy = field(default_factory=VersionStrategy)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    report_dir: Optional[str] = None

    def model_schema(self) -> ModelSchema:
        return ModelSchema.create(self.schema, self.hyperparams)

    def to_dict(self) -> dict:
        def plain(v):
            if dataclasses.is_dataclass(v):
                return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if hasattr(v, "value") and not isinstance(v, (int, float, str)):
                return v.value
            if isinstance(v, str) and hasattr(v, "value"):
                return v.value
            return v

        return plain(self)


def _section(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {
    "hyperparams": HyperParams,
    "cluster": ClusterSection,
    "log": LogSection,
    "checkpoint": CheckpointSection,
    "sync": GatherConfig,
    "fault_tolerance": FaultToleranceConfig,
    "scheduler": SchedulerSection,
    "trigger": TriggerConfig,
    "strategy": VersionStrategy,
    "trainer": TrainerSection,
    "workload": WorkloadSpec,
}


def config_from_dict(raw: Mapping) -> Config:
    if not isinstance(raw, Mapping):
        raise ConfigError("configuration must be a mapping")
    known = set(_SECTIONS) | {"model_id", "schema", "report_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _section(cls, raw.get(name), name) for name, cls in _SECTIONS.items()}
    for key in ("model_id", "schema", "report_dir"):
        if key in raw:
            kwargs[key] = str(raw[key]).upper() if key == "schema" else raw[key]
    cfg = Config(**kwargs)
    try:
        cfg.model_schema()
    except ValueError as exc:
        raise ConfigError(f"schema: {exc}") from None
    if not cfg.model_id or "/" in cfg.model_id:
        raise ConfigError("model_id must be a non-empty name without '/'")
    return cfg


def load_config(path) -> Config:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)
