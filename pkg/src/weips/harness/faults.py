"""Fault plans: timed failure actions applied to a running topology."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional

import yaml

from ..errors import ConfigError

ACTIONS = {
    "kill-master": ("shard",),
    "kill-slave-replica": ("shard", "replica"),
    "stall-log": ("partition", "duration"),
    "corrupt-checkpoint": ("version", "shard"),
}


@dataclass
class FaultAction:
    at: int  # sample count at which the action fires
    action: str
    args: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ConfigError(f"unknown fault action {self.action!r}")
        missing = [a for a in ACTIONS[self.action] if a not in self.args]
        if missing:
            raise ConfigError(f"{self.action} needs {missing}")
        if self.at < 0:
            raise ConfigError("fault time must be >= 0")


@dataclass
class FaultPlan:
    actions: List[FaultAction] = field(default_factory=list)
    config: Optional[str] = None

    def __post_init__(self):
        self.actions = sorted(self.actions, key=lambda a: a.at)

    def validate_against(self, topo) -> None:
        """Every action must reference a component that exists in ``topo``."""
        for a in self.actions:
            ok = True
            if a.action == "kill-master" or a.action == "corrupt-checkpoint":
                ok = 0 <= a.args["shard"] < topo.num_masters
            elif a.action == "kill-slave-replica":
                ok = 0 <= a.args["shard"] < topo.num_slaves and 0 <= a.args["replica"] < topo.cfg.cluster.replicas
            elif a.action == "stall-log":
                ok = 0 <= a.args["partition"] < topo.num_partitions
            if not ok:
                raise ConfigError(f"fault {a.action} {a.args} references a component that does not exist")


def plan_from_dict(raw: Mapping) -> FaultPlan:
    actions = []
    for item in raw.get("actions", []):
        item = dict(item)
        at = item.pop("at")
        action = item.pop("action")
        actions.append(FaultAction(int(at), action, item))
    return FaultPlan(actions, raw.get("config"))


def load_plan(path) -> FaultPlan:
    """Read a YAML plan; a relative ``config`` path is taken relative to the plan file."""
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    plan = plan_from_dict(raw)
    if plan.config is not None and not Path(plan.config).is_absolute():
        plan.config = str(path.parent / plan.config)
    return plan


def apply_fault(topo, fault: FaultAction) -> None:
    a = fault.args
    if fault.action == "kill-master":
        topo.kill_master(a["shard"])
    elif fault.action == "kill-slave-replica":
        topo.kill_replica(a["shard"], a["replica"])
    elif fault.action == "stall-log":
        topo.log.stall(a["partition"], until=topo.clock.now() + float(a["duration"]))
    elif fault.action == "corrupt-checkpoint":
        for store in topo.stores.values():
            if store.has_version(topo.model_id, a["version"]):
                store.corrupt_shard(topo.model_id, a["version"], a["shard"])
    topo.record_fault(fault.at, fault.action, **a)
