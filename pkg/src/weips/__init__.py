"""Fused online training and serving parameter server.

Training shards (masters) apply FTRL or SGD updates and stream full-value
parameter records through a partitioned log to serving shards (slaves).
A scheduler owns checkpointing and failover as well as version rollback; a monitor
scores the training stream before each update and decides when to roll
back.
"""

from .core_model import HyperParams, ModelSchema, Sample, SchemaName
from .errors import WeipsError
from .master import GatherConfig, GatherMode, MasterShard, load_checkpoint
from .plog import FileLog, MemoryLog, Op, UpdateRecord
from .scheduler import Registry, Scheduler, ShardMap
from .slave import ReplicaGroup, ServingClient, SlaveReplica

__all__ = [
    "FileLog",
    "GatherConfig",
    "GatherMode",
    "HyperParams",
    "MasterShard",
    "MemoryLog",
    "ModelSchema",
    "Op",
    "Registry",
    "ReplicaGroup",
    "Sample",
    "Scheduler",
    "SchemaName",
    "ServingClient",
    "ShardMap",
    "SlaveReplica",
    "UpdateRecord",
    "WeipsError",
    "load_checkpoint",
]

__version__ = "0.1.0"
