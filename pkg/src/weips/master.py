"""Training-side parameter shard.

Gradient pushes mutate the shard's feature table and drop ``(feature_id, op)``
entries into the collector. A single sync pipeline drains the collector,
deduplicates ids in the gatherer, reads the *current* full value of every
surviving id and pushes the batch to the shard's log partition.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .checkpoint import CheckpointMeta, CheckpointStore, ShardSnapshot, find_version
from .clock import WallClock
from .core_model import (
    ModelSchema,
    Slot,
    apply_update,
    initial_slot,
    transform_for_serving,
    zero_slot,
)
from .errors import (
    AppendFailedError,
    CheckpointError,
    IncompleteCheckpointError,
    NumericOverflowError,
    RoutingError,
    UnavailableError,
)
from .plog import Op, PartitionedLog, UpdateRecord, partition_for_shard

logger = logging.getLogger(__name__)

DirtyEntry = Tuple[int, Op]


def owner(feature_id: int, num_shards: int) -> int:
    return feature_id % num_shards


class FeatureTable:
    """Parameter slots owned by one master shard (training view)."""

    def __init__(self, shard_id: int, num_shards: int, schema: ModelSchema):
        self.shard_id = shard_id
        self.num_shards = num_shards
        self.schema = schema
        self.slots: Dict[int, Slot] = {}
        self.touched: Dict[int, int] = {}
        self.epoch = 0
        self.lock = threading.RLock()
        self.dirty_at_snapshot: List[int] = []

    def __len__(self):
        return len(self.slots)

    def owns(self, feature_id: int) -> bool:
        return feature_id % self.num_shards == self.shard_id

    def snapshot(self) -> ShardSnapshot:
        with self.lock:
            return ShardSnapshot(dict(self.slots), dict(self.touched), self.epoch)

    @classmethod
    def from_snapshot(cls, shard_id: int, num_shards: int, schema: ModelSchema, snap: ShardSnapshot) -> "FeatureTable":
        table = cls(shard_id, num_shards, schema)
        for fid in snap.slots:
            if not table.owns(fid):
                raise RoutingError(f"feature {fid} does not belong to shard {shard_id}/{num_shards}")
        table.slots = dict(snap.slots)
        table.touched = dict(snap.touched)
        table.epoch = snap.epoch
        return table


class Collector:
    """Multi-producer, single-consumer queue of dirty ids.

    Producers only block when the queue holds ``maxsize`` entries; nothing is
    ever dropped.
    """

    def __init__(self, maxsize: int = 1 << 20):
        self.maxsize = maxsize
        self._q: deque = deque()
        self._room = threading.Condition(threading.Lock())
        self._waiting = 0
        self.drained = 0
        self.backpressure_waits = 0

    def __len__(self):
        return len(self._q)

    def collect(self, entry: DirtyEntry) -> None:
        if len(self._q) >= self.maxsize:
            self._wait_for_room()
        self._q.append(entry)

    def collect_many(self, entries: Iterable[DirtyEntry]) -> None:
        entries = list(entries)
        if len(self._q) + len(entries) > self.maxsize:
            self._wait_for_room()
        self._q.extend(entries)

    def _wait_for_room(self) -> None:
        with self._room:
            self.backpressure_waits += 1
            self._waiting += 1
            try:
                while len(self._q) >= self.maxsize:
                    self._room.wait(0.05)
            finally:
                self._waiting -= 1

    def drain(self, max_entries: Optional[int] = None) -> List[DirtyEntry]:
        q = self._q
        n = len(q)
        if max_entries is not None:
            n = min(n, max_entries)
        popleft = q.popleft
        out = [popleft() for _ in range(n)]
        self.drained += n
        if self._waiting:
            with self._room:
                self._room.notify_all()
        return out


class GatherMode(str, Enum):
    REALTIME = "REALTIME"
    THRESHOLD = "THRESHOLD"
    PERIOD = "PERIOD"


@dataclass
class GatherConfig:
    mode: GatherMode = GatherMode.REALTIME
    threshold_count: int = 1000
    period: float = 10.0

    def __post_init__(self):
        self.mode = GatherMode(self.mode)
        if self.mode is GatherMode.THRESHOLD and self.threshold_count < 1:
            raise ValueError("threshold_count must be positive")
        if self.mode is GatherMode.PERIOD and not self.period > 0:
            raise ValueError("period must be positive")


class Gatherer:
    """Deduplicates drained entries (last op per id wins) until the mode fires."""

    def __init__(self, cfg: GatherConfig, clock):
        self.cfg = cfg
        self.clock = clock
        self.pending: Dict[int, Op] = {}
        self.last_emit = clock.now()

    def offer(self, entries: Iterable[DirtyEntry]) -> None:
        pending = self.pending
        for fid, op in entries:
            pending[fid] = op

    def ready(self) -> bool:
        mode = self.cfg.mode
        if mode is GatherMode.REALTIME:
            return True
        if mode is GatherMode.THRESHOLD:
            return len(self.pending) >= self.cfg.threshold_count
        return self.clock.now() - self.last_emit >= self.cfg.period

    def take(self) -> Dict[int, Op]:
        out, self.pending = self.pending, {}
        self.last_emit = self.clock.now()
        return out


def gather(
    pending: Sequence[DirtyEntry],
    table: FeatureTable,
    cfg: GatherConfig,
    clock,
    model_id: str = "model",
    gatherer: Optional[Gatherer] = None,
) -> Optional[List[UpdateRecord]]:
    """Turn drained dirty entries into full-value update records, or ``None`` (not yet)."""
    gatherer = gatherer or Gatherer(cfg, clock)
    gatherer.offer(pending)
    if not gatherer.pending or not gatherer.ready():
        return None
    return materialize(gatherer.take(), table, model_id)


def materialize(ids: Mapping[int, Op], table: FeatureTable, model_id: str) -> List[UpdateRecord]:
    schema = table.schema
    shard = table.shard_id
    out = []
    with table.lock:
        slots = table.slots
        touched = table.touched
        epoch = table.epoch
        for fid, op in ids.items():
            slot = slots.get(fid) if op is Op.UPSERT else None
            if slot is None:
                out.append(UpdateRecord(fid, Op.DELETE, model_id, shard, {}, epoch))
            else:
                out.append(UpdateRecord(fid, Op.UPSERT, model_id, shard, transform_for_serving(schema, slot), touched.get(fid, epoch)))
    return out


@dataclass
class PushAck:
    applied_count: int
    epoch: int
    rejected: List[int] = field(default_factory=list)


@dataclass
class FilterPolicy:
    max_params: Optional[int] = None
    min_epoch_age: Optional[int] = None


class MasterShard:
    """One training shard of one model."""

    role = "master"

    def __init__(
        self,
        model_id: str,
        shard_id: int,
        num_shards: int,
        schema: ModelSchema,
        log: PartitionedLog,
        gather_cfg: Optional[GatherConfig] = None,
        clock=None,
        stores: Optional[Mapping[str, CheckpointStore]] = None,
        collector_bound: int = 1 << 20,
        filter_policy: Optional[FilterPolicy] = None,
        max_push_retries: int = 4,
        retry_base_delay: float = 0.001,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not 0 <= shard_id < num_shards:
            raise ValueError(f"shard {shard_id} outside 0..{num_shards - 1}")
        self.model_id = model_id
        self.shard_id = shard_id
        self.num_shards = num_shards
        self.schema = schema
        self.log = log
        self.clock = clock or WallClock()
        self.gather_cfg = gather_cfg or GatherConfig()
        self.stores = dict(stores or {})
        self.filter_policy = filter_policy or FilterPolicy()
        self.table = FeatureTable(shard_id, num_shards, schema)
        self.collector = Collector(collector_bound)
        self.gatherer = Gatherer(self.gather_cfg, self.clock)
        self.partition = partition_for_shard(shard_id, log.num_partitions)
        self.max_push_retries = max_push_retries
        self.retry_base_delay = retry_base_delay
        self._sleep = sleep
        self._pipeline_lock = threading.Lock()
        self._ckpt_pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"ckpt-m{shard_id}")
        self._local_version = 0
        self.alive = True
        self.sync_stalled = False
        self.records_emitted = 0
        self.appends = 0
        self.append_failures = 0
        self.checkpoint_starts: List[float] = []
        # (clock time, dirty entries drained so far, records in this batch) per successful push
        self.emissions: List[Tuple[float, int, int]] = []

    # training path -------------------------------------------------------

    def _ensure_alive(self):
        if not self.alive:
            raise UnavailableError(f"master shard {self.shard_id} is down")

    def _check_owned(self, ids: Iterable[int]) -> None:
        n, k = self.num_shards, self.shard_id
        for fid in ids:
            if fid % n != k:
                raise RoutingError(f"feature {fid} belongs to shard {fid % n}, not {k}")

    def push_gradients(self, model_id: str, updates: Mapping[int, Mapping[str, Sequence[float]]]) -> PushAck:
        self._ensure_alive()
        self._check_model(model_id)
        if not updates:
            return PushAck(0, self.table.epoch)
        self._check_owned(updates)
        schema = self.schema
        table = self.table
        rejected = []
        dirty = []
        with table.lock:
            epoch = table.epoch + 1
            slots = table.slots
            touched = table.touched
            for fid, grads in updates.items():
                cur = slots.get(fid)
                if cur is None:
                    cur = initial_slot(schema, fid)
                try:
                    new = apply_update(schema, cur, grads)
                except NumericOverflowError:
                    rejected.append(fid)
                    continue
                slots[fid] = new
                touched[fid] = epoch
                dirty.append((fid, Op.UPSERT))
            if dirty:
                table.epoch = epoch
                self.collector.collect_many(dirty)
            return PushAck(len(dirty), table.epoch, rejected)

    def pull_parameters(self, model_id: str, ids: Sequence[int]) -> Dict[int, Slot]:
        self._ensure_alive()
        self._check_model(model_id)
        self._check_owned(ids)
        slots = self.table.slots
        out = {}
        zero = None
        for fid in ids:
            slot = slots.get(fid)
            if slot is None:
                if zero is None:
                    zero = zero_slot(self.schema)
                slot = zero
            out[fid] = slot
        return out

    def _check_model(self, model_id: str) -> None:
        if model_id != self.model_id:
            raise RoutingError(f"shard serves model {self.model_id!r}, not {model_id!r}")

    # sync pipeline ---------------------------------------------------------

    def collect(self, entry: DirtyEntry) -> None:
        self.collector.collect(entry)

    def pipeline_step(self) -> int:
        """Drain -> gather -> push once. Returns the number of records appended."""
        if not self.alive:
            return 0
        with self._pipeline_lock:
            self.gatherer.offer(self.collector.drain())
            if not self.gatherer.pending or not self.gatherer.ready():
                return 0
            ids = self.gatherer.take()
            records = materialize(ids, self.table, self.model_id)
            try:
                self.push_to_log(records)
            except AppendFailedError:
                # keep the ids dirty; they are re-read at full value once the log recovers
                for fid, op in ids.items():
                    self.gatherer.pending.setdefault(fid, op)
                return 0
            self.emissions.append((self.clock.now(), self.collector.drained, len(records)))
            return len(records)

    def push_to_log(self, records: Sequence[UpdateRecord]) -> Optional[int]:
        if not records:
            return None
        delay = self.retry_base_delay
        for attempt in range(self.max_push_retries + 1):
            try:
                offset = self.log.append(self.partition, records)
            except AppendFailedError:
                self.append_failures += 1
                if attempt == self.max_push_retries:
                    if not self.sync_stalled:
                        logger.warning("master %d: log partition %d unavailable, sync stalled", self.shard_id, self.partition)
                    self.sync_stalled = True
                    raise
                self._sleep(delay)
                delay *= 2
                continue
            self.sync_stalled = False
            self.appends += 1
            self.records_emitted += len(records)
            return offset
        return None

    def flush(self, max_rounds: int = 1000) -> int:
        """Push everything pending regardless of gather mode (used at quiescence)."""
        total = 0
        with self._pipeline_lock:
            for _ in range(max_rounds):
                self.gatherer.offer(self.collector.drain())
                if not self.gatherer.pending:
                    break
                ids = self.gatherer.take()
                records = materialize(ids, self.table, self.model_id)
                try:
                    self.push_to_log(records)
                except AppendFailedError:
                    for fid, op in ids.items():
                        self.gatherer.pending.setdefault(fid, op)
                    break
                self.emissions.append((self.clock.now(), self.collector.drained, len(records)))
                total += len(records)
        return total

    @property
    def dirty_drained(self) -> int:
        return self.collector.drained

    # feature filter -------------------------------------------------------

    def filter_features(self, policy: Optional[FilterPolicy] = None) -> List[DirtyEntry]:
        policy = policy or self.filter_policy
        table = self.table
        with table.lock:
            victims: List[int] = []
            if policy.min_epoch_age is not None:
                horizon = table.epoch - policy.min_epoch_age
                victims.extend(fid for fid, e in table.touched.items() if e < horizon)
            if policy.max_params is not None:
                excess = len(table.slots) - len(set(victims)) - policy.max_params
                if excess > 0:
                    chosen = set(victims)
                    by_age = sorted((e, fid) for fid, e in table.touched.items() if fid not in chosen)
                    victims.extend(fid for _, fid in by_age[:excess])
            if not victims:
                return []
            entries = []
            for fid in dict.fromkeys(victims):
                table.slots.pop(fid, None)
                table.touched.pop(fid, None)
                entries.append((fid, Op.DELETE))
            table.epoch += 1
            self.collector.collect_many(entries)
        return entries

    # checkpoints ------------------------------------------------------------

    def snapshot_for_checkpoint(self) -> Tuple[ShardSnapshot, Dict[int, int], float]:
        """Copy the table and the log tails at one epoch boundary.

        Holding the pipeline lock means no batch is in flight, so every id's last
        record below the captured tails carries its snapshot value unless the id
        is still dirty (and will be re-emitted above the tails).
        """
        with self._pipeline_lock, self.table.lock:
            snap = self.table.snapshot()
            snap.dirty = list({fid for fid, _ in list(self.collector._q)} | set(self.gatherer.pending))
            offsets = self.log.tails()
        return snap, offsets, self.clock.wall() if hasattr(self.clock, "wall") else time.time()

    def save_checkpoint_async(self, dest: str = "local", version: Optional[int] = None) -> "Future[CheckpointMeta]":
        self._ensure_alive()
        store = self.stores.get(dest)
        if store is None:
            raise CheckpointError(f"no checkpoint store configured for destination {dest!r}")
        if version is None:
            version = self._local_version + 1
        self._local_version = max(self._local_version, version)
        self.checkpoint_starts.append(time.monotonic())
        snap, offsets, created = self.snapshot_for_checkpoint()

        def write():
            try:
                return store.write_shard(self.model_id, self.shard_id, self.num_shards, version, self.schema, snap, offsets, created)
            except OSError as exc:
                raise CheckpointError(f"shard {self.shard_id}: writing v{version} failed: {exc}") from exc

        return self._ckpt_pool.submit(write)

    def save_checkpoint(self, dest: str = "local", version: Optional[int] = None) -> CheckpointMeta:
        return self.save_checkpoint_async(dest, version).result()

    def restore(
        self,
        table: FeatureTable,
        reconcile_from: Optional[Mapping[int, int]] = None,
        dirty: Iterable[int] = (),
    ) -> int:
        """Install a recovered table and re-announce ids whose serving value may differ.

        Those are the ids dirty at snapshot time plus every id this shard logged
        after the checkpoint's offsets; each is re-emitted with its restored
        state (or as a DELETE when absent).
        """
        if table.shard_id != self.shard_id or table.num_shards != self.num_shards:
            raise RoutingError("restored table belongs to another shard layout")
        with self._pipeline_lock, self.table.lock:
            self.table.slots = table.slots
            self.table.touched = table.touched
            self.table.epoch = table.epoch
            self.collector.drain()
            self.gatherer.pending.clear()
        seen: Dict[int, Op] = dict.fromkeys(dirty, Op.UPSERT)
        if reconcile_from is not None:
            start = reconcile_from.get(self.partition, 0)
            for _, rec in self.log.read_from(self.partition, start):
                if rec.source_shard == self.shard_id and rec.model_id == self.model_id:
                    seen[rec.feature_id] = Op.UPSERT
        with self.table.lock:
            entries = [(fid, Op.UPSERT if fid in self.table.slots else Op.DELETE) for fid in seen]
            self.collector.collect_many(entries)
        return len(entries)

    # lifecycle ------------------------------------------------------------

    def health(self) -> dict:
        self._ensure_alive()
        return {
            "role": self.role,
            "shard": self.shard_id,
            "pid": os.getpid(),
            "ident": id(self),
            "epoch": self.table.epoch,
            "params": len(self.table),
            "sync_stalled": self.sync_stalled,
            "pending": len(self.collector) + len(self.gatherer.pending),
        }

    def kill(self) -> None:
        self.alive = False

    def close(self) -> None:
        self.alive = False
        self._ckpt_pool.shutdown(wait=True)


def load_checkpoint(
    stores: Sequence[CheckpointStore],
    model_id: str,
    version: int,
    target_shard_count: int,
    only_shard: Optional[int] = None,
) -> Dict[int, FeatureTable]:
    """Load a complete checkpoint set, re-routing every id by ``owner(id, target_shard_count)``.

    With ``only_shard`` only that target shard's slice is built (partial recovery).
    When source and target shard counts agree only the matching file is read.
    """
    store = find_version(stores, model_id, version)
    if store is None:
        raise IncompleteCheckpointError(f"no complete v{version} of {model_id}")
    manifest = store.manifest(model_id, version)
    schema = ModelSchema.from_dict(manifest["schema"])
    src_count = manifest["num_shards"]
    targets = range(target_shard_count) if only_shard is None else [only_shard]
    parts = {k: ShardSnapshot({}, {}, 0) for k in targets}
    if src_count == target_shard_count:
        sources = list(targets)
    else:
        sources = list(range(src_count))
    for src in sources:
        _, snap = store.read_shard(model_id, version, src)
        for fid, slot in snap.slots.items():
            k = fid % target_shard_count
            part = parts.get(k)
            if part is None:
                continue
            part.slots[fid] = slot
            part.touched[fid] = snap.touched.get(fid, 0)
        for fid in snap.dirty:
            part = parts.get(fid % target_shard_count)
            if part is not None:
                part.dirty.append(fid)
        for part in parts.values():
            part.epoch = max(part.epoch, snap.epoch)
    tables = {}
    for k, snap in parts.items():
        tables[k] = FeatureTable.from_snapshot(k, target_shard_count, schema, snap)
        tables[k].dirty_at_snapshot = snap.dirty
    return tables


def checkpoint_offsets(stores: Sequence[CheckpointStore], model_id: str, version: int, shard_id: int) -> Dict[int, int]:
    store = find_version(stores, model_id, version)
    if store is None:
        raise IncompleteCheckpointError(f"no complete v{version} of {model_id}")
    return store.read_shard_meta(model_id, version, shard_id).log_offsets
