"""Experiment harness: configuration, workloads, topologies, fault plans, reports and the CLI."""

from .cluster import ProcessTopology, Topology, run_cluster
from .config import Config, config_from_dict, load_config
from .faults import FaultAction, FaultPlan, load_plan
from .freshness import FreshnessResult, measure_freshness
from .workload import Corruption, Workload, WorkloadSpec, generate_samples

__all__ = [
    "Config",
    "Corruption",
    "FaultAction",
    "FaultPlan",
    "FreshnessResult",
    "ProcessTopology",
    "Topology",
    "Workload",
    "WorkloadSpec",
    "config_from_dict",
    "generate_samples",
    "load_config",
    "load_plan",
    "measure_freshness",
    "run_cluster",
]
