"""Control plane: metadata registry, membership, checkpoints, failover, version switching."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import queue
import random
import threading
from concurrent.futures import Future
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Mapping, MutableMapping, Optional, Sequence, Tuple

from .checkpoint import CheckpointMeta, CheckpointStore, find_version
from .clock import WallClock
from .errors import (
    CheckpointError,
    DowngradeAbortedError,
    DuplicateRegistrationError,
    IncompleteCheckpointError,
    RegistryConflictError,
    ShardDownError,
    UnavailableError,
    WeipsError,
)
from .monitor import Decision, MetricSample, TriggerConfig, VersionStrategy, select_version, should_downgrade
from .slave import ReplicaGroup, ReplicaHandle

logger = logging.getLogger(__name__)


# registry ---------------------------------------------------------------------


@dataclass
class Lease:
    lease_id: int
    ttl: float
    expires_at: float
    keys: List[str] = field(default_factory=list)


class Registry:
    """Linearizable key-value store with compare-and-swap and prefix watches; keys may carry TTL leases.

    Revisions are global and strictly increasing; ``cas(key, 0, v)`` creates a
    key only if it does not exist.
    """

    def __init__(self, clock=None):
        self.clock = clock or WallClock()
        self._data: Dict[str, Tuple[object, int]] = {}
        self._rev = 0
        self._lock = threading.RLock()
        self._watchers: List[Tuple[str, Callable]] = []
        self._leases: Dict[int, Lease] = {}
        self._key_lease: Dict[str, int] = {}
        self._lease_ids = itertools.count(1)

    @property
    def revision(self) -> int:
        return self._rev

    def get(self, key: str) -> Tuple[object, int]:
        with self._lock:
            value, rev = self._data.get(key, (None, 0))
            return copy.deepcopy(value), rev

    def list(self, prefix: str) -> Dict[str, object]:
        with self._lock:
            return {k: copy.deepcopy(v) for k, (v, _) in sorted(self._data.items()) if k.startswith(prefix)}

    def put(self, key: str, value, lease: Optional[int] = None) -> int:
        with self._lock:
            rev = self._commit(key, value, lease)
            events = [("put", key, value, rev)]
        self._notify(events)
        return rev

    def cas(self, key: str, expected_rev: int, value, lease: Optional[int] = None) -> int:
        with self._lock:
            _, cur = self._data.get(key, (None, 0))
            if cur != expected_rev:
                raise RegistryConflictError(f"{key}: expected revision {expected_rev}, found {cur}")
            rev = self._commit(key, value, lease)
            events = [("put", key, value, rev)]
        self._notify(events)
        return rev

    def delete(self, key: str) -> bool:
        with self._lock:
            if key not in self._data:
                return False
            events = [self._remove(key)]
        self._notify(events)
        return True

    def _commit(self, key, value, lease):
        json.dumps(value)  # values must be plain structured documents
        self._rev += 1
        self._data[key] = (copy.deepcopy(value), self._rev)
        if lease is not None:
            if lease not in self._leases:
                raise KeyError(f"unknown lease {lease}")
            self._leases[lease].keys.append(key)
            self._key_lease[key] = lease
        return self._rev

    def _remove(self, key):
        self._rev += 1
        value, _ = self._data.pop(key)
        lease = self._key_lease.pop(key, None)
        if lease is not None and lease in self._leases:
            self._leases[lease].keys = [k for k in self._leases[lease].keys if k != key]
        return ("delete", key, value, self._rev)

    def watch(self, prefix: str, callback: Callable[[str, str, object, int], None]) -> Callable[[], None]:
        entry = (prefix, callback)
        with self._lock:
            self._watchers.append(entry)

        def cancel():
            with self._lock:
                if entry in self._watchers:
                    self._watchers.remove(entry)

        return cancel

    def _notify(self, events):
        with self._lock:
            watchers = list(self._watchers)
        for kind, key, value, rev in events:
            for prefix, cb in watchers:
                if key.startswith(prefix):
                    try:
                        cb(kind, key, copy.deepcopy(value), rev)
                    except Exception:  # noqa: BLE001 - a faulty watcher must not break commits
                        logger.exception("registry watcher failed for %s", key)

    # leases

    def grant(self, ttl: float) -> int:
        with self._lock:
            lid = next(self._lease_ids)
            self._leases[lid] = Lease(lid, ttl, self.clock.now() + ttl)
            return lid

    def renew(self, lease_id: int) -> bool:
        with self._lock:
            lease = self._leases.get(lease_id)
            if lease is None:
                return False
            lease.expires_at = self.clock.now() + lease.ttl
            return True

    def lease_alive(self, lease_id: int) -> bool:
        return lease_id in self._leases

    def expire(self) -> List[str]:
        """Drop every lease past its deadline together with its keys."""
        now = self.clock.now()
        events = []
        with self._lock:
            for lid, lease in list(self._leases.items()):
                if lease.expires_at <= now:
                    for key in list(lease.keys):
                        if key in self._data:
                            events.append(self._remove(key))
                    del self._leases[lid]
        self._notify(events)
        return [key for _, key, _, _ in events]


# shard map ----------------------------------------------------------------------


@dataclass
class FaultToleranceConfig:
    local_interval: float = 60.0
    remote_interval: float = 600.0
    incremental_backup: bool = True

    def __post_init__(self):
        if self.remote_interval < self.local_interval:
            raise ValueError("remote save interval must be >= local save interval")


@dataclass
class ShardMap:
    model_id: str
    num_master_shards: int
    num_slave_shards: int
    num_partitions: int
    master_endpoints: Dict[int, str] = field(default_factory=dict)
    replica_groups: Dict[int, List[str]] = field(default_factory=dict)
    active_version: Optional[int] = None
    fault_tolerance: FaultToleranceConfig = field(default_factory=FaultToleranceConfig)

    def __post_init__(self):
        for name in ("num_master_shards", "num_slave_shards", "num_partitions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def validate(self) -> None:
        eps = list(self.master_endpoints.values()) + [e for g in self.replica_groups.values() for e in g]
        if len(eps) != len(set(eps)):
            raise ValueError("endpoints must be unique")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["master_endpoints"] = {str(k): v for k, v in self.master_endpoints.items()}
        d["replica_groups"] = {str(k): list(v) for k, v in self.replica_groups.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShardMap":
        d = dict(d)
        d["master_endpoints"] = {int(k): v for k, v in d.get("master_endpoints", {}).items()}
        d["replica_groups"] = {int(k): list(v) for k, v in d.get("replica_groups", {}).items()}
        d["fault_tolerance"] = FaultToleranceConfig(**d.get("fault_tolerance", {}))
        return cls(**d)


def shard_map_key(model_id: str) -> str:
    return f"{model_id}/shardmap"


def versions_key(model_id: str) -> str:
    return f"{model_id}/versions"


def metrics_prefix(model_id: str) -> str:
    return f"{model_id}/metrics/"


def metric_key(model_id: str, window_id: int) -> str:
    return f"{model_id}/metrics/{window_id:09d}"


def update_shard_map(registry: Registry, model_id: str, fn: Callable[[ShardMap], None], max_retries: int = 100) -> Tuple[ShardMap, int]:
    """Read-modify-CAS loop; returns the committed map and the number of conflicts seen."""
    key = shard_map_key(model_id)
    conflicts = 0
    for _ in range(max_retries):
        raw, rev = registry.get(key)
        if raw is None:
            raise KeyError(f"no shard map for {model_id}")
        sm = ShardMap.from_dict(raw)
        fn(sm)
        sm.validate()
        try:
            registry.cas(key, rev, sm.to_dict())
            return sm, conflicts
        except RegistryConflictError:
            conflicts += 1
    raise RegistryConflictError(f"gave up updating {key} after {max_retries} conflicts")


def publish_metric(registry: Registry, model_id: str, sample: MetricSample) -> None:
    registry.put(metric_key(model_id, sample.window_id), sample.to_dict())


def metric_history(registry: Registry, model_id: str) -> List[MetricSample]:
    return [MetricSample.from_dict(v) for v in registry.list(metrics_prefix(model_id)).values()]


# scheduler ----------------------------------------------------------------------


@dataclass
class CheckpointRound:
    version: int
    dest: str
    published: bool
    metas: List[CheckpointMeta] = field(default_factory=list)
    errors: Dict[int, str] = field(default_factory=dict)
    jitter: Dict[int, float] = field(default_factory=dict)
    start_times: Dict[int, float] = field(default_factory=dict)


@dataclass
class SwitchReport:
    version: int
    hold: bool
    availability: List[Tuple[int, str, int]] = field(default_factory=list)  # (shard, replica switching, routable others)


class Spawner:
    """Hooks the scheduler uses to create replacement components (provided by the harness)."""

    def spawn_master(self, shard_id: int):
        raise NotImplementedError

    def spawn_slave(self, shard_id: int, version: int) -> ReplicaHandle:
        raise NotImplementedError


class Scheduler:
    def __init__(
        self,
        registry: Registry,
        shard_map: ShardMap,
        masters: MutableMapping[int, object],
        groups: Mapping[int, ReplicaGroup],
        stores: Mapping[str, CheckpointStore],
        clock=None,
        spawner: Optional[Spawner] = None,
        probe_interval: float = 0.5,
        miss_threshold: int = 3,
        jitter_fraction: float = 0.2,
        lease_ttl: Optional[float] = None,
        trigger: Optional[TriggerConfig] = None,
        strategy: Optional[VersionStrategy] = None,
        auto_failover: bool = True,
        auto_downgrade: bool = False,
        downgrade_hold: bool = True,
        seed: int = 0,
        real_jitter: bool = False,
    ):
        self.registry = registry
        self.model_id = shard_map.model_id
        self.masters = masters
        self.groups = groups
        self.stores = dict(stores)
        self.clock = clock or registry.clock
        self.spawner = spawner
        self.probe_interval = probe_interval
        self.miss_threshold = miss_threshold
        self.jitter_fraction = jitter_fraction
        self.lease_ttl = lease_ttl if lease_ttl is not None else probe_interval * miss_threshold
        self.trigger = trigger or TriggerConfig()
        self.strategy = strategy or VersionStrategy()
        self.auto_failover = auto_failover
        self.auto_downgrade = auto_downgrade
        self.downgrade_hold = downgrade_hold
        self.real_jitter = real_jitter
        self.rng = random.Random(seed)
        self.events: List[dict] = []
        self.failed_shards: set = set()
        self.master_misses: Dict[int, int] = {k: 0 for k in masters}
        self.leases: Dict[str, int] = {}
        self.last_local = self.clock.now()
        self.last_remote = self.clock.now()
        self.last_probe = self.clock.now()
        self.downgrade_floor = 0  # metric windows at or below this id are ignored by the trigger
        self.last_decision: Optional[Decision] = None
        self._commands: "queue.Queue[Tuple[Callable, Future]]" = queue.Queue()
        self._loop_thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._seq = threading.RLock()
        key = shard_map_key(self.model_id)
        raw, rev = registry.get(key)
        if raw is None:
            registry.cas(key, 0, shard_map.to_dict())
        if registry.get(versions_key(self.model_id))[0] is None:
            try:
                registry.cas(versions_key(self.model_id), 0, [])
            except RegistryConflictError:
                pass
        self.metrics: List[MetricSample] = metric_history(registry, self.model_id)
        registry.watch(f"{self.model_id}/members/", self._on_member_event)
        registry.watch(metrics_prefix(self.model_id), self._on_metric_event)

    # bookkeeping ---------------------------------------------------------------

    def event(self, kind: str, **detail) -> None:
        e = {"t": self.clock.now(), "kind": kind, **detail}
        self.events.append(e)
        logger.info("scheduler event %s %s", kind, detail)

    @property
    def shard_map(self) -> ShardMap:
        raw, _ = self.registry.get(shard_map_key(self.model_id))
        return ShardMap.from_dict(raw)

    def versions(self) -> List[dict]:
        raw, _ = self.registry.get(versions_key(self.model_id))
        return list(raw or [])

    def head_version(self) -> int:
        vs = self.versions()
        return max((v["version"] for v in vs), default=0)

    def _stores_in_order(self) -> List[CheckpointStore]:
        return [self.stores[d] for d in ("local", "remote-sim") if d in self.stores]

    # membership ------------------------------------------------------------------

    def register(self, kind: str, shard_id: int, endpoint: str, ttl: Optional[float] = None) -> int:
        key = f"{self.model_id}/members/{kind}/{shard_id}/{endpoint}"
        lease = self.registry.grant(ttl if ttl is not None else self.lease_ttl)
        try:
            self.registry.cas(key, 0, {"kind": kind, "shard": shard_id, "endpoint": endpoint}, lease=lease)
        except RegistryConflictError:
            raise DuplicateRegistrationError(f"{kind} {shard_id} at {endpoint} is already registered") from None
        self.leases[key] = lease

        def add(sm: ShardMap):
            if kind == "master":
                sm.master_endpoints[shard_id] = endpoint
            else:
                group = sm.replica_groups.setdefault(shard_id, [])
                if endpoint not in group:
                    group.append(endpoint)

        update_shard_map(self.registry, self.model_id, add)
        return lease

    def heartbeat(self, kind: str, shard_id: int, endpoint: str) -> bool:
        lease = self.leases.get(f"{self.model_id}/members/{kind}/{shard_id}/{endpoint}")
        return lease is not None and self.registry.renew(lease)

    def _on_member_event(self, kind: str, key: str, value, rev: int) -> None:
        if kind != "delete" or value is None:
            return
        self.leases.pop(key, None)
        member_kind, shard, endpoint = value["kind"], value["shard"], value["endpoint"]

        def drop(sm: ShardMap):
            if member_kind == "master":
                if sm.master_endpoints.get(shard) == endpoint:
                    del sm.master_endpoints[shard]
            else:
                sm.replica_groups[shard] = [e for e in sm.replica_groups.get(shard, []) if e != endpoint]

        update_shard_map(self.registry, self.model_id, drop)
        self.event("lease-expired", member=member_kind, shard=shard, endpoint=endpoint)

    def _on_metric_event(self, kind: str, key: str, value, rev: int) -> None:
        if kind != "put":
            return
        self.metrics.append(MetricSample.from_dict(value))
        if self.auto_downgrade:
            self.submit(self._safe, self.evaluate_downgrade)

    # health probing -------------------------------------------------------------

    def probe_once(self) -> None:
        """One heartbeat round: HEALTH to every component, renew leases, act on misses."""
        for k in list(self.masters):
            if k in self.failed_shards:
                continue
            client = self.masters[k]
            try:
                client.health()
            except (UnavailableError, OSError, WeipsError):
                self.master_misses[k] = self.master_misses.get(k, 0) + 1
                if self.master_misses[k] == self.miss_threshold:
                    self.event("master-unhealthy", shard=k)
                    if self.auto_failover:
                        self._safe(self.failover_master, k)
                continue
            self.master_misses[k] = 0
            self.heartbeat("master", k, getattr(client, "endpoint", f"master-{k}"))
        for shard, group in self.groups.items():
            for handle in list(group.replicas):
                try:
                    handle.client.health()
                except (UnavailableError, OSError, WeipsError):
                    handle.misses += 1
                    if handle.misses >= self.miss_threshold and handle.healthy:
                        handle.healthy = False
                        self.event("replica-unhealthy", shard=shard, endpoint=handle.endpoint)
                        self._safe(self.failover_slave, shard, handle.endpoint)
                    continue
                handle.misses = 0
                handle.healthy = True
                self.heartbeat("slave", shard, handle.endpoint)
        self.registry.expire()
        self.last_probe = self.clock.now()

    def _safe(self, fn, *args):
        try:
            return fn(*args)
        except WeipsError as exc:
            self.event("action-failed", action=fn.__name__, error=str(exc))
            return None

    # checkpoints ------------------------------------------------------------------

    def trigger_checkpoints(self, dest: str = "local", jitter_window: Optional[float] = None) -> CheckpointRound:
        """Ask every master shard to save; publish the version only if all succeed."""
        with self._seq:
            store = self.stores.get(dest)
            if store is None:
                raise CheckpointError(f"no checkpoint store for {dest!r}")
            version = self.head_version() + 1
            sm = self.shard_map
            if jitter_window is None:
                interval = sm.fault_tolerance.local_interval if dest == "local" else sm.fault_tolerance.remote_interval
                jitter_window = self.jitter_fraction * interval
            rnd = CheckpointRound(version, dest, False)
            for k in sorted(self.masters):
                rnd.jitter[k] = self.rng.uniform(0.0, jitter_window)

            def save(k):
                rnd.start_times[k] = self.clock.now()
                try:
                    meta = self.masters[k].save_checkpoint(dest, version)
                    if isinstance(meta, dict):
                        meta = CheckpointMeta.from_dict(meta)
                    rnd.metas.append(meta)
                except (WeipsError, OSError) as exc:
                    rnd.errors[k] = str(exc)

            if self.real_jitter:
                threads = []
                for k, delay in rnd.jitter.items():
                    t = threading.Timer(delay, save, args=(k,))
                    t.start()
                    threads.append(t)
                for t in threads:
                    t.join()
            else:
                for k, _ in sorted(rnd.jitter.items(), key=lambda kv: kv[1]):
                    save(k)
            if rnd.errors or len(rnd.metas) != len(self.masters):
                self.event("checkpoint-failed", version=version, dest=dest, errors=rnd.errors)
                return rnd
            manifest = store.commit_version(self.model_id, version, rnd.metas)
            entry = {"version": version, "dest": dest, "created_at": manifest["created_at"], "log_offsets": manifest["log_offsets"], "param_count": manifest["param_count"]}
            for _ in range(100):
                raw, rev = self.registry.get(versions_key(self.model_id))
                try:
                    self.registry.cas(versions_key(self.model_id), rev, list(raw or []) + [entry])
                    break
                except RegistryConflictError:
                    continue
            rnd.published = True
            self.event("checkpoint", version=version, dest=dest, params=manifest["param_count"])
            return rnd

    def maybe_checkpoint(self) -> List[CheckpointRound]:
        """Fire interval-driven checkpoints (local every L, remote-sim every R)."""
        out = []
        now = self.clock.now()
        ft = self.shard_map.fault_tolerance
        if "local" in self.stores and now - self.last_local >= ft.local_interval:
            self.last_local = now
            out.append(self.trigger_checkpoints("local"))
        if "remote-sim" in self.stores and now - self.last_remote >= ft.remote_interval:
            self.last_remote = now
            out.append(self.trigger_checkpoints("remote-sim"))
        return out

    def complete_versions(self) -> List[int]:
        return sorted(v["version"] for v in self.versions() if find_version(self._stores_in_order(), self.model_id, v["version"]))

    # failover ---------------------------------------------------------------------

    def failover_master(self, shard_id: int) -> None:
        with self._seq:
            versions = self.complete_versions()
            if not versions:
                self.failed_shards.add(shard_id)
                self.event("master-unrecoverable", shard=shard_id)
                raise CheckpointError(f"master shard {shard_id}: no checkpoint to recover from")
            if self.spawner is None:
                raise WeipsError("no spawner configured for failover")
            client = self.spawner.spawn_master(shard_id)
            last_error = None
            for version in reversed(versions):
                try:
                    resp = client.load_checkpoint(version)
                    break
                except WeipsError as exc:
                    last_error = exc
            else:
                self.failed_shards.add(shard_id)
                self.event("master-unrecoverable", shard=shard_id, error=str(last_error))
                raise CheckpointError(f"master shard {shard_id}: no loadable checkpoint ({last_error})")
            self.masters[shard_id] = client
            self.master_misses[shard_id] = 0
            old_key = next((k for k in self.leases if k.startswith(f"{self.model_id}/members/master/{shard_id}/")), None)
            if old_key is not None:
                self.registry.delete(old_key)
            self.register("master", shard_id, getattr(client, "endpoint", f"master-{shard_id}"))
            self.event("master-recovered", shard=shard_id, version=version, params=resp.get("param_count"))

    def failover_slave(self, shard_id: int, endpoint: str) -> Optional[ReplicaHandle]:
        with self._seq:
            group = self.groups[shard_id]
            try:
                handle = group.get(endpoint)
                handle.healthy = False
            except KeyError:
                pass
            group.remove(endpoint)
            key = f"{self.model_id}/members/slave/{shard_id}/{endpoint}"
            if key in self.leases:
                self.registry.delete(key)
            self.event("replica-removed", shard=shard_id, endpoint=endpoint)
            if not group.healthy():
                self.event("shard-down", shard=shard_id)
            if len(group.healthy()) >= group.min_replicas or self.spawner is None:
                return None
            versions = self.complete_versions()
            version = versions[-1] if versions else 0
            handle = self.spawner.spawn_slave(shard_id, version)
            group.add(handle)
            self.register("slave", shard_id, handle.endpoint)
            self.event("replica-bootstrapped", shard=shard_id, endpoint=handle.endpoint, version=version)
            return handle

    # versions ---------------------------------------------------------------------

    def switch_version(self, target_version: int, hold: bool = False) -> SwitchReport:
        """Hot-switch every serving replica to ``target_version``, one replica per group at a time."""
        with self._seq:
            if target_version != 0 and find_version(self._stores_in_order(), self.model_id, target_version) is None:
                raise IncompleteCheckpointError(f"v{target_version} is not a complete checkpoint; switch rejected")
            report = SwitchReport(target_version, hold)
            for shard, group in sorted(self.groups.items()):
                for handle in list(group.replicas):
                    if not handle.healthy:
                        continue
                    others = [r for r in group.replicas if r is not handle and r.routable]
                    report.availability.append((shard, handle.endpoint, len(others)))
                    if others:
                        handle.switching = True
                    try:
                        handle.client.switch_version(target_version, hold)
                    except UnavailableError:
                        handle.healthy = False
                    finally:
                        handle.switching = False

            def set_active(sm: ShardMap):
                sm.active_version = target_version

            update_shard_map(self.registry, self.model_id, set_active)
            self.event("switch-version", version=target_version, hold=hold)
            return report

    # downgrade --------------------------------------------------------------------

    def evaluate_downgrade(self, history: Optional[Sequence[MetricSample]] = None) -> Decision:
        if history is None:
            history = self.metrics
        history = [s for s in history if s.window_id > self.downgrade_floor]
        decision = should_downgrade(history, self.trigger)
        self.last_decision = decision
        if decision.trigger and self.auto_downgrade:
            self.downgrade(history)
        return decision

    def candidates(self, history: Sequence[MetricSample]) -> List[Tuple[int, List[MetricSample]]]:
        by_version: Dict[int, List[MetricSample]] = {}
        for s in history:
            by_version.setdefault(s.version, []).append(s)
        return [(v, by_version.get(v, [])) for v in self.complete_versions()]

    def downgrade(self, history: Optional[Sequence[MetricSample]] = None, strategy: Optional[VersionStrategy] = None) -> int:
        full = list(self.metrics)
        strategy = strategy or self.strategy
        degraded = self.head_version()
        cands = self.candidates(full)
        if strategy.kind.value == "BEST_METRIC":
            cands = [(v, h) for v, h in cands if h]
        try:
            target = select_version(cands, strategy, degraded_version=degraded)
        except DowngradeAbortedError as exc:
            self.event("downgrade-aborted", reason=str(exc))
            raise
        self.switch_version(target, hold=self.downgrade_hold)
        self.downgrade_floor = max((s.window_id for s in full), default=0)
        self.event("downgrade", degraded=degraded, target=target, strategy=strategy.kind.value)
        return target

    # event loop --------------------------------------------------------------------

    def tick(self) -> None:
        """Run all timer-driven duties once (used directly in deterministic mode)."""
        now = self.clock.now()
        if now - self.last_probe >= self.probe_interval:
            self.probe_once()
        self.maybe_checkpoint()
        self._run_commands()

    def submit(self, fn: Callable, *args, **kwargs) -> Future:
        """Queue an admin command onto the scheduler's serialized event stream."""
        fut: Future = Future()
        if self._loop_thread is None or not self._loop_thread.is_alive():
            try:
                fut.set_result(fn(*args, **kwargs))
            except Exception as exc:  # noqa: BLE001
                fut.set_exception(exc)
            return fut
        self._commands.put((lambda: fn(*args, **kwargs), fut))
        return fut

    def _run_commands(self) -> None:
        while True:
            try:
                fn, fut = self._commands.get_nowait()
            except queue.Empty:
                return
            try:
                fut.set_result(fn())
            except Exception as exc:  # noqa: BLE001
                fut.set_exception(exc)

    def start(self, tick: float = 0.05) -> None:
        def loop():
            while not self._stop.is_set():
                try:
                    self.tick()
                except Exception:  # noqa: BLE001
                    logger.exception("scheduler tick failed")
                self._stop.wait(tick)

        self._stop.clear()
        self._loop_thread = threading.Thread(target=loop, name=f"scheduler-{self.model_id}", daemon=True)
        self._loop_thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._loop_thread is not None:
            self._loop_thread.join(timeout=5)
        self._loop_thread = None
        self._run_commands()
