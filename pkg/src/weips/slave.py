"""Serving-side shards: scatter from the log, versioned tables, replica groups."""

from __future__ import annotations

import itertools
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .checkpoint import CheckpointStore, all_versions, find_version
from .core_model import SERVING, ModelSchema, Slot, transform_for_serving, zero_slot
from .errors import (
    CheckpointError,
    InvalidSlotError,
    OutOfRangeError,
    RecoveryNeededError,
    RoutingError,
    ShardDownError,
    UnavailableError,
)
from .plog import Op, PartitionedLog, UpdateRecord

logger = logging.getLogger(__name__)

TransformHook = Callable[[UpdateRecord], Slot]


@dataclass
class ServingTable:
    slave_shard_id: int
    num_slave_shards: int
    version: int = 0
    slots: Dict[int, Slot] = field(default_factory=dict)
    consumed_offsets: Dict[int, int] = field(default_factory=dict)

    def owns(self, feature_id: int) -> bool:
        return feature_id % self.num_slave_shards == self.slave_shard_id


def identity_hook(record: UpdateRecord) -> Slot:
    return dict(record.payload)


class SlaveReplica:
    """One replica of one serving shard.

    Scatter consumes every partition and keeps only ids routed to this shard,
    because master and slave shard counts are independent moduli.
    """

    role = "slave"

    def __init__(
        self,
        model_id: str,
        shard_id: int,
        num_shards: int,
        schema: ModelSchema,
        log: PartitionedLog,
        stores: Sequence[CheckpointStore] = (),
        replica_id: int = 0,
        hook: Optional[TransformHook] = None,
    ):
        self.model_id = model_id
        self.shard_id = shard_id
        self.num_shards = num_shards
        self.replica_id = replica_id
        self.schema = schema
        self.log = log
        self.stores = list(stores)
        self.hook = hook or identity_hook
        self.table = ServingTable(shard_id, num_shards, 0, {}, {p: 0 for p in range(log.num_partitions)})
        self._lock = threading.RLock()
        self._widths = schema.widths
        self._names = frozenset(schema.serving_names)
        self.alive = True
        self.held = False
        self.switching = False
        self.quarantined = 0
        self.applied = 0
        self.skipped = 0

    @property
    def endpoint(self) -> str:
        return f"slave-{self.shard_id}-r{self.replica_id}"

    def _ensure_alive(self):
        if not self.alive:
            raise UnavailableError(f"{self.endpoint} is down")

    # scatter -----------------------------------------------------------------

    def model_transform_hook(self, record: UpdateRecord) -> Slot:
        """Run the configured hook and check the result is a well-formed serving slot."""
        slot = self.hook(record)
        widths = self._widths
        if slot.keys() != self._names:
            raise InvalidSlotError(f"serving slot for {record.feature_id} has matrices {sorted(slot)}")
        for name, values in slot.items():
            if len(values) != widths[name]:
                raise InvalidSlotError(f"matrix {name!r} of {record.feature_id} has width {len(values)}")
        return slot

    def apply(self, record: UpdateRecord) -> bool:
        """Apply one record if this shard owns its id. Returns whether it was applied."""
        if record.model_id != self.model_id or record.feature_id % self.num_shards != self.shard_id:
            return False
        slots = self.table.slots
        if record.op is Op.UPSERT:
            try:
                slots[record.feature_id] = self.model_transform_hook(record)
            except (InvalidSlotError, KeyError, TypeError, ValueError):
                self.quarantined += 1
                logger.warning("%s: quarantined malformed record for id %d", self.endpoint, record.feature_id)
                return False
        else:
            slots.pop(record.feature_id, None)
        return True

    def scatter_step(self, max_batch: int = 1 << 16, partitions: Optional[Iterable[int]] = None) -> int:
        """Consume up to ``max_batch`` records from each subscribed partition."""
        if not self.alive or self.held:
            return 0
        applied = 0
        with self._lock:
            offsets = self.table.consumed_offsets
            for p in range(self.log.num_partitions) if partitions is None else partitions:
                start = offsets.get(p, 0)
                try:
                    batch = self.log.read_from(p, start, max_batch)
                except OutOfRangeError as exc:
                    raise RecoveryNeededError(f"{self.endpoint}: {exc}") from exc
                if not batch:
                    continue
                n = 0
                apply = self.apply
                mod, mine, model = self.num_shards, self.shard_id, self.model_id
                for _, rec in batch:
                    # cheap ownership filter first: most records belong to other shards
                    if rec.feature_id % mod == mine and rec.model_id == model and apply(rec):
                        n += 1
                applied += n
                self.skipped += len(batch) - n
                offsets[p] = batch[-1][0] + 1
            self.applied += applied
        return applied

    def catch_up(self, max_batch: int = 1 << 16) -> int:
        total = 0
        while True:
            n_before = sum(self.table.consumed_offsets.values())
            total += self.scatter_step(max_batch)
            if sum(self.table.consumed_offsets.values()) == n_before:
                return total

    def lag(self) -> int:
        tails = self.log.tails()
        return sum(tails[p] - self.table.consumed_offsets.get(p, 0) for p in tails)

    # serving -----------------------------------------------------------------

    def pull_serving(self, model_id: str, ids: Sequence[int]) -> Dict[int, Slot]:
        self._ensure_alive()
        if model_id != self.model_id:
            raise RoutingError(f"replica serves {self.model_id!r}, not {model_id!r}")
        n, k = self.num_shards, self.shard_id
        slots = self.table.slots
        out = {}
        zero = None
        for fid in ids:
            if fid % n != k:
                raise RoutingError(f"feature {fid} is served by shard {fid % n}, not {k}")
            slot = slots.get(fid)
            if slot is None:
                if zero is None:
                    zero = zero_slot(self.schema, SERVING)
                slot = zero
            out[fid] = slot
        return out

    # versions -----------------------------------------------------------------

    def build_version(self, version: int) -> ServingTable:
        """Serving table for ``version``: its snapshot (owned ids, serving view) plus its offsets.

        Version 0 is the empty model at offset zero.
        """
        parts = range(self.log.num_partitions)
        if version == 0:
            return ServingTable(self.shard_id, self.num_shards, 0, {}, {p: 0 for p in parts})
        store = find_version(self.stores, self.model_id, version)
        if store is None:
            raise CheckpointError(f"no complete v{version} of {self.model_id}")
        manifest = store.manifest(self.model_id, version)
        slots: Dict[int, Slot] = {}
        offsets = {p: None for p in parts}
        schema = self.schema
        n, k = self.num_shards, self.shard_id
        for src in range(manifest["num_shards"]):
            meta, snap = store.read_shard(self.model_id, version, src)
            for p, off in meta.log_offsets.items():
                if p in offsets and (offsets[p] is None or off < offsets[p]):
                    offsets[p] = off
            for fid, slot in snap.slots.items():
                if fid % n == k:
                    slots[fid] = transform_for_serving(schema, slot)
        return ServingTable(self.shard_id, self.num_shards, version, slots, {p: (o or 0) for p, o in offsets.items()})

    def load_version(self, version: int, hold: bool = False) -> ServingTable:
        """Install ``version`` and resume scatter from its stored offsets.

        A missing or corrupt checkpoint falls back to the next older complete
        version. ``hold`` pins the table (no scatter) until :meth:`release`.
        """
        self._ensure_alive()
        candidates = [version] + [v for v in reversed(all_versions(self.stores, self.model_id)) if v < version]
        last_error: Optional[Exception] = None
        for v in candidates:
            try:
                table = self.build_version(v)
            except CheckpointError as exc:
                logger.warning("%s: cannot load v%d: %s", self.endpoint, v, exc)
                last_error = exc
                continue
            with self._lock:
                self.table = table
                self.held = hold
            return table
        raise ShardDownError(f"{self.endpoint}: no loadable version at or below v{version}: {last_error}")

    def release(self) -> None:
        self.held = False

    def health(self) -> dict:
        self._ensure_alive()
        return {
            "role": self.role,
            "shard": self.shard_id,
            "replica": self.replica_id,
            "pid": os.getpid(),
            "ident": id(self),
            "version": self.table.version,
            "offsets": dict(self.table.consumed_offsets),
            "params": len(self.table.slots),
            "held": self.held,
            "quarantined": self.quarantined,
        }

    def kill(self) -> None:
        self.alive = False

    def close(self) -> None:
        self.alive = False


@dataclass
class ReplicaHandle:
    endpoint: str
    client: object
    healthy: bool = True
    switching: bool = False
    misses: int = 0

    @property
    def routable(self) -> bool:
        return self.healthy and not self.switching


class ReplicaGroup:
    def __init__(self, slave_shard_id: int, replicas: Iterable[ReplicaHandle] = (), min_replicas: int = 1):
        self.slave_shard_id = slave_shard_id
        self.replicas: List[ReplicaHandle] = list(replicas)
        self.min_replicas = min_replicas
        self._lock = threading.Lock()

    def healthy(self) -> List[ReplicaHandle]:
        return [r for r in self.replicas if r.routable]

    def get(self, endpoint: str) -> ReplicaHandle:
        for r in self.replicas:
            if r.endpoint == endpoint:
                return r
        raise KeyError(endpoint)

    def add(self, handle: ReplicaHandle) -> None:
        with self._lock:
            if any(r.endpoint == handle.endpoint for r in self.replicas):
                raise ValueError(f"duplicate replica endpoint {handle.endpoint}")
            self.replicas.append(handle)

    def remove(self, endpoint: str) -> None:
        with self._lock:
            self.replicas = [r for r in self.replicas if r.endpoint != endpoint]

    @property
    def servable(self) -> bool:
        return bool(self.healthy())


def replica_route(group: ReplicaGroup, request_key: int, exclude: Iterable[str] = ()) -> ReplicaHandle:
    """Round-robin over the group's routable replicas by the caller's request counter."""
    excluded = set(exclude)
    live = [r for r in group.replicas if r.routable and r.endpoint not in excluded]
    if not live:
        raise ShardDownError(f"slave shard {group.slave_shard_id} has no healthy replica")
    return live[request_key % len(live)]


class ServingClient:
    """Predictor-side client: routes pulls to replica groups, one retry on failure."""

    def __init__(self, model_id: str, groups: Mapping[int, ReplicaGroup], retries: int = 1):
        self.model_id = model_id
        self.groups = groups
        self.retries = retries
        self._counter = itertools.count()
        self.routed: List[Tuple[float, str]] = []  # (monotonic time, endpoint) when record_routes is on
        self.record_routes = False

    def pull(self, ids: Sequence[int]) -> Dict[int, Slot]:
        n = len(self.groups)
        by_shard: Dict[int, List[int]] = {}
        for fid in ids:
            by_shard.setdefault(fid % n, []).append(fid)
        out: Dict[int, Slot] = {}
        for shard, shard_ids in by_shard.items():
            out.update(self._pull_shard(shard, shard_ids))
        return out

    def _pull_shard(self, shard: int, ids: List[int]) -> Dict[int, Slot]:
        group = self.groups[shard]
        tried: List[str] = []
        key = next(self._counter)
        for _ in range(self.retries + 1):
            handle = replica_route(group, key, exclude=tried)
            if self.record_routes:
                self.routed.append((time.monotonic(), handle.endpoint))
            try:
                return handle.client.pull_serving(self.model_id, ids)
            except UnavailableError:
                tried.append(handle.endpoint)
        raise UnavailableError(f"slave shard {shard}: {len(tried)} attempts failed")
