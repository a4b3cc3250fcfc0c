"""Cluster assembly: masters, slave replica groups, scheduler, trainers and predictors.

Components talk only through their wire clients and the log. In
single-process mode a client wraps an in-process transport; in
multi-process mode it wraps a TCP connection to a node subprocess.

Two driving styles exist. *Threaded* (wall clock): every master pipeline
and every replica's scatter runs in its own thread. *Pumped* (logical
clock): the caller advances time and steps every stage in a fixed order,
which makes runs bit-for-bit reproducible.
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from ..checkpoint import CheckpointStore
from ..clock import LogicalClock, WallClock
from ..core_model import ModelSchema, Sample, transform_for_serving
from ..errors import RecoveryNeededError, UnavailableError, WeipsError
from ..master import FilterPolicy, MasterShard
from ..plog import PartitionedLog, open_log
from ..scheduler import (
    Registry,
    Scheduler,
    ShardMap,
    Spawner,
    metric_history,
    publish_metric,
)
from ..slave import ReplicaGroup, ReplicaHandle, ServingClient, SlaveReplica, TransformHook
from ..wire import LocalTransport, MasterClient, SlaveClient, TcpTransport, master_handler, slave_handler
from .config import Config
from .trainer import MetricMonitor, Trainer
from .workload import Workload

logger = logging.getLogger(__name__)


def _loop(stop: threading.Event, alive: Callable[[], bool], step: Callable[[], int], idle: float, name: str) -> threading.Thread:
    def run():
        while not stop.is_set() and alive():
            try:
                worked = step()
            except RecoveryNeededError:
                logger.error("%s: consumer fell out of range, stopping", name)
                return
            except Exception:  # noqa: BLE001 - a background stage must keep going
                logger.exception("%s: step failed", name)
                worked = 0
            if not worked:
                stop.wait(idle)

    t = threading.Thread(target=run, name=name, daemon=True)
    t.start()
    return t


@dataclass
class FaultRecord:
    at_sample: int
    action: str
    args: dict = field(default_factory=dict)
    t: float = 0.0


class Topology(Spawner):
    """In-process cluster. Also the scheduler's spawner for replacement components."""

    def __init__(
        self,
        cfg: Config,
        workdir=None,
        threaded: Optional[bool] = None,
        hook: Optional[TransformHook] = None,
        encode_messages: bool = False,
        idle_sleep: float = 0.001,
    ):
        self.cfg = cfg
        self.model_id = cfg.model_id
        self.schema: ModelSchema = cfg.model_schema()
        c = cfg.cluster
        self.num_masters = c.num_masters
        self.num_slaves = c.num_slaves
        self.num_partitions = c.num_partitions
        self.threaded = (c.clock == "wall") if threaded is None else threaded
        self.clock = WallClock() if c.clock == "wall" else LogicalClock()
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="weips-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.hook = hook
        self.encode_messages = encode_messages
        self.idle_sleep = idle_sleep
        log_dir = cfg.log.dir or str(self.workdir / "log")
        self.log: PartitionedLog = open_log(
            cfg.log.backend, c.num_partitions, cfg.model_id, log_dir, compress=cfg.log.compress, fsync=cfg.log.fsync
        )
        self.log.clock = self.clock
        self.stores: Dict[str, CheckpointStore] = {
            "local": CheckpointStore(cfg.checkpoint.dir or self.workdir / "ckpt-local", "local"),
            "remote-sim": CheckpointStore(cfg.checkpoint.remote_dir or self.workdir / "ckpt-remote", "remote-sim"),
        }
        self.registry = Registry(self.clock)
        self.masters: Dict[int, MasterShard] = {}
        self.master_clients: Dict[int, MasterClient] = {}
        self.replicas: Dict[Tuple[int, int], SlaveReplica] = {}
        self.groups: Dict[int, ReplicaGroup] = {k: ReplicaGroup(k, min_replicas=c.min_replicas) for k in range(c.num_slaves)}
        self._generation: Dict[int, int] = {}
        self._next_replica: Dict[int, int] = {}
        self._stop = threading.Event()
        self._threads: Dict[str, threading.Thread] = {}
        self.faults: List[FaultRecord] = []
        self.samples_fed = 0
        self.started = False

        for k in range(c.num_masters):
            self.master_clients[k] = self._make_master(k)
        for k in range(c.num_slaves):
            for _ in range(c.replicas):
                self.groups[k].add(self._make_replica(k))
        sm = ShardMap(
            cfg.model_id, c.num_masters, c.num_slaves, c.num_partitions, fault_tolerance=cfg.fault_tolerance
        )
        s = cfg.scheduler
        self.scheduler = Scheduler(
            self.registry,
            sm,
            self.master_clients,
            self.groups,
            self.stores,
            clock=self.clock,
            spawner=self,
            probe_interval=s.probe_interval,
            miss_threshold=s.miss_threshold,
            jitter_fraction=s.jitter_fraction,
            trigger=cfg.trigger,
            strategy=cfg.strategy,
            auto_failover=s.auto_failover,
            auto_downgrade=s.auto_downgrade,
            downgrade_hold=s.downgrade_hold,
            seed=cfg.workload.seed,
        )
        self.monitor = MetricMonitor(cfg.trigger, self.scheduler.head_version, self.clock, self._publish_metric)
        self.trainers = [
            Trainer(cfg.model_id, self.schema, self.master_clients, c.num_masters, self.monitor)
            for _ in range(cfg.trainer.num_trainers)
        ]
        self.serving = ServingClient(cfg.model_id, self.groups)

    # component construction (overridden by the multi-process topology) ---------

    def _master_endpoint(self, k: int) -> str:
        gen = self._generation.get(k, 0)
        return f"master-{k}" if gen == 0 else f"master-{k}-g{gen}"

    def _make_master(self, k: int) -> MasterClient:
        c = self.cfg.cluster
        shard = MasterShard(
            self.model_id,
            k,
            c.num_masters,
            self.schema,
            self.log,
            self.cfg.sync,
            self.clock,
            self.stores,
            collector_bound=c.collector_bound,
            sleep=self.clock.sleep,
        )
        self.masters[k] = shard
        client = MasterClient(LocalTransport(master_handler(shard), self.encode_messages), self._master_endpoint(k))
        if self.threaded and self.started:
            self._start_master_thread(k)
        return client

    def _make_replica(self, k: int, version: Optional[int] = None) -> ReplicaHandle:
        r = self._next_replica.get(k, 0)
        self._next_replica[k] = r + 1
        replica = SlaveReplica(
            self.model_id, k, self.num_slaves, self.schema, self.log, list(self.stores.values()), replica_id=r, hook=self.hook
        )
        if version is not None:
            replica.load_version(version)
            replica.catch_up()
        self.replicas[(k, r)] = replica
        transport = LocalTransport(slave_handler(replica), self.encode_messages)
        handle = ReplicaHandle(replica.endpoint, SlaveClient(transport, replica.endpoint))
        if self.threaded and self.started:
            self._start_replica_thread(k, r)
        return handle

    def _start_master_thread(self, k: int) -> None:
        shard = self.masters[k]
        self._threads[f"m{k}-{id(shard)}"] = _loop(
            self._stop, lambda: shard.alive, shard.pipeline_step, self.idle_sleep, f"pipeline-m{k}"
        )

    def _start_replica_thread(self, k: int, r: int) -> None:
        rep = self.replicas[(k, r)]
        self._threads[f"s{k}r{r}"] = _loop(self._stop, lambda: rep.alive, rep.scatter_step, self.idle_sleep, f"scatter-s{k}r{r}")

    # spawner -----------------------------------------------------------------

    def spawn_master(self, shard_id: int) -> MasterClient:
        self._generation[shard_id] = self._generation.get(shard_id, 0) + 1
        return self._make_master(shard_id)

    def spawn_slave(self, shard_id: int, version: int) -> ReplicaHandle:
        return self._make_replica(shard_id, version)

    # lifecycle ---------------------------------------------------------------

    def start(self, timeout: float = 30.0) -> "Topology":
        if self.started:
            return self
        self.started = True
        for k, client in self.master_clients.items():
            self.scheduler.register("master", k, client.endpoint)
        for k, group in self.groups.items():
            for h in group.replicas:
                self.scheduler.register("slave", k, h.endpoint)
        if self.threaded:
            for k in self.masters:
                self._start_master_thread(k)
            for k, r in self.replicas:
                self._start_replica_thread(k, r)
            self.scheduler.start()
        self.wait_healthy(timeout)
        return self

    def wait_healthy(self, timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            try:
                for client in self.master_clients.values():
                    client.health()
                for group in self.groups.values():
                    for h in group.replicas:
                        h.client.health()
                return
            except (UnavailableError, OSError) as exc:
                if time.monotonic() > deadline:
                    raise UnavailableError(f"cluster not healthy after {timeout}s: {exc}") from None
                time.sleep(0.05)

    def stop(self) -> None:
        self._stop.set()
        self.scheduler.stop()
        for t in list(self._threads.values()):
            t.join(timeout=5)
        for m in self.masters.values():
            if m.alive:
                m.close()
            else:
                m._ckpt_pool.shutdown(wait=True)
        self.log.close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # metrics ---------------------------------------------------------------

    def _publish_metric(self, sample) -> None:
        publish_metric(self.registry, self.model_id, sample)

    def metric_history(self):
        return metric_history(self.registry, self.model_id)

    # driving -----------------------------------------------------------------

    def pump(self) -> int:
        """One deterministic step of every pipeline stage (pumped mode)."""
        moved = 0
        for k in sorted(self.masters):
            moved += self.masters[k].pipeline_step()
        for key in sorted(self.replicas):
            rep = self.replicas[key]
            if rep.alive:
                moved += rep.scatter_step()
        return moved

    def train_batch(self, batch: Sequence[Sample], trainer: int = 0) -> None:
        t = self.trainers[trainer % len(self.trainers)]
        while True:
            try:
                t.train_batch(batch)
                break
            except UnavailableError:
                # a shard is down: let the scheduler notice and recover it, then retry the batch
                self._wait_for_recovery()
        self.samples_fed += len(batch)
        if not self.threaded:
            self.clock.advance(len(batch) / self.cfg.workload.samples_per_second)
            self.pump()
            self.scheduler.tick()

    def _wait_for_recovery(self) -> None:
        failed = self.scheduler.failed_shards
        if failed:
            raise UnavailableError(f"master shards {sorted(failed)} are unrecoverable")
        if self.threaded:
            time.sleep(self.cfg.scheduler.probe_interval / 2)
        else:
            self.clock.advance(self.cfg.scheduler.probe_interval)
            self.scheduler.tick()

    def run_workload(
        self,
        workload: Optional[Workload] = None,
        start: int = 0,
        stop: Optional[int] = None,
        faults: Sequence = (),
        on_batch: Optional[Callable[["Topology", int], None]] = None,
        pace: bool = False,
        halt: Optional[threading.Event] = None,
    ) -> int:
        """Feed samples ``start..stop`` in mini-batches, firing fault actions at their sample counts."""
        from .faults import apply_fault  # local import: faults depends on this module

        workload = workload or Workload(self.cfg.workload)
        pending = sorted(faults, key=lambda f: f.at)
        bs = self.cfg.trainer.batch_size
        rate = self.cfg.workload.samples_per_second
        t0 = time.monotonic()
        i = start
        for n, batch in enumerate(workload.batches(bs, start, stop)):
            if halt is not None and halt.is_set():
                return i
            while pending and pending[0].at <= i:
                apply_fault(self, pending.pop(0))
            self.train_batch(batch, trainer=n)
            i += len(batch)
            if on_batch is not None:
                on_batch(self, i)
            if pace and self.threaded:
                ahead = (i - start) / rate - (time.monotonic() - t0)
                if ahead > 0:
                    time.sleep(ahead)
        for f in pending:
            apply_fault(self, f)
        return i

    def drain(self, timeout: float = 120.0) -> None:
        """Bring every live replica to the log tail after all pending updates are pushed."""
        deadline = time.monotonic() + timeout
        while True:
            for k in sorted(self.masters):
                if self.masters[k].alive:
                    self.masters[k].flush()
            if self.threaded:
                time.sleep(0.01)
            for key in sorted(self.replicas):
                rep = self.replicas[key]
                if rep.alive and not rep.held:
                    rep.catch_up()
            pending = sum(
                len(m.collector) + len(m.gatherer.pending) for m in self.masters.values() if m.alive
            )
            lag = sum(rep.lag() for rep in self.replicas.values() if rep.alive and not rep.held)
            if pending == 0 and lag == 0:
                return
            if time.monotonic() > deadline:
                raise TimeoutError(f"drain incomplete: {pending} pending ids, lag {lag}")
            if not self.threaded:
                # pumped mode with the log stalled: move time so stalls can expire
                self.clock.advance(self.cfg.scheduler.probe_interval)

    # faults --------------------------------------------------------------------

    def kill_master(self, k: int) -> None:
        shard = self.masters[k]
        shard.kill()
        self.master_clients[k].transport.down = True

    def kill_replica(self, k: int, r: int) -> None:
        rep = self.replicas[(k, r)]
        rep.kill()
        for h in self.groups[k].replicas:
            if h.endpoint == rep.endpoint:
                h.client.transport.down = True

    def live_replicas(self) -> Dict[Tuple[int, int], SlaveReplica]:
        return {key: rep for key, rep in self.replicas.items() if rep.alive}

    def record_fault(self, at: int, action: str, **args) -> None:
        self.faults.append(FaultRecord(at, action, args, self.clock.now()))
        self.scheduler.event("fault-injected", action=action, at_sample=at, **args)

    # oracles ---------------------------------------------------------------------

    def master_union(self) -> Dict[int, dict]:
        union = {}
        for shard in self.masters.values():
            if shard.alive:
                union.update(shard.table.slots)
        return union

    def expected_serving(self, slave_shard: int) -> Dict[int, dict]:
        schema = self.schema
        n = self.num_slaves
        return {fid: transform_for_serving(schema, slot) for fid, slot in self.master_union().items() if fid % n == slave_shard}

    def consistency_mismatches(self) -> Dict[str, int]:
        """Per live replica: ids whose serving slot differs from the master union (0 everywhere = consistent)."""
        out = {}
        expected = {k: self.expected_serving(k) for k in range(self.num_slaves)}
        for (k, r), rep in sorted(self.live_replicas().items()):
            got = rep.table.slots
            exp = expected[k]
            bad = sum(1 for fid in exp.keys() | got.keys() if exp.get(fid) != got.get(fid))
            out[rep.endpoint] = bad
        return out

    # reporting -------------------------------------------------------------------

    def counters(self) -> dict:
        drained = sum(m.dirty_drained for m in self.masters.values())
        emitted = sum(m.records_emitted for m in self.masters.values())
        return {
            "samples": self.samples_fed,
            "dirty_drained": drained,
            "records_emitted": emitted,
            "dedup_ratio": (drained / emitted) if emitted else None,
            "bytes_appended": self.log.bytes_appended,
            "frames_appended": self.log.frames_appended,
            "gather_mode": self.cfg.sync.mode.value,
            "params": sum(len(m.table) for m in self.masters.values() if m.alive),
        }

    def artifacts(self, freshness: Optional[dict] = None) -> dict:
        return {
            "model_id": self.model_id,
            "config": self.cfg.to_dict(),
            "metrics": [m.to_dict() for m in self.metric_history()],
            "events": list(self.scheduler.events),
            "faults": [f.__dict__ for f in self.faults],
            "counters": self.counters(),
            "freshness": freshness,
            "versions": self.scheduler.versions(),
        }


# multi-process mode -------------------------------------------------------------


class ProcessTopology(Topology):
    """Masters and slave replicas run as ``python -m weips.harness.node`` subprocesses.

    The log must be file-backed so every process sees the same partitions.
    The registry and scheduler stay in the launching process.
    """

    def __init__(self, cfg: Config, workdir=None, **kw):
        if cfg.log.backend != "file":
            cfg.log.backend = "file"
        self.procs: Dict[str, subprocess.Popen] = {}
        self._cfg_path: Optional[Path] = None
        kw["threaded"] = False
        super().__init__(cfg, workdir, **kw)

    def _node_config(self) -> Path:
        if self._cfg_path is None:
            raw = self.cfg.to_dict()
            raw["log"]["dir"] = self.cfg.log.dir or str(self.workdir / "log")
            raw["checkpoint"]["dir"] = str(self.stores["local"].root)
            raw["checkpoint"]["remote_dir"] = str(self.stores["remote-sim"].root)
            raw["cluster"]["clock"] = "wall"
            self._cfg_path = self.workdir / "node-config.json"
            self._cfg_path.write_text(json.dumps(raw))
        return self._cfg_path

    def _spawn(self, name: str, args: List[str]) -> Tuple[str, int]:
        cmd = [sys.executable, "-m", "weips.harness.node", "--config", str(self._node_config()), *args]
        proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True)
        line = proc.stdout.readline().strip()
        if not line.startswith("READY "):
            proc.kill()
            self._teardown()
            raise UnavailableError(f"{name} failed to start: {line!r}")
        self.procs[name] = proc
        return "127.0.0.1", int(line.split()[1])

    def _make_master(self, k: int) -> MasterClient:
        endpoint = self._master_endpoint(k)
        host, port = self._spawn(endpoint, ["--role", "master", "--shard", str(k)])
        return MasterClient(TcpTransport(host, port), endpoint)

    def _make_replica(self, k: int, version: Optional[int] = None) -> ReplicaHandle:
        r = self._next_replica.get(k, 0)
        self._next_replica[k] = r + 1
        endpoint = f"slave-{k}-r{r}"
        args = ["--role", "slave", "--shard", str(k), "--replica", str(r)]
        if version is not None:
            args += ["--version", str(version)]
        host, port = self._spawn(endpoint, args)
        return ReplicaHandle(endpoint, SlaveClient(TcpTransport(host, port), endpoint))

    def kill_master(self, k: int) -> None:
        self._kill(self.master_clients[k].endpoint)

    def kill_replica(self, k: int, r: int) -> None:
        self._kill(f"slave-{k}-r{r}")

    def _kill(self, name: str) -> None:
        proc = self.procs.pop(name, None)
        if proc is not None:
            proc.kill()
            proc.wait()

    def pump(self) -> int:
        return 0

    def train_batch(self, batch: Sequence[Sample], trainer: int = 0) -> None:
        t = self.trainers[trainer % len(self.trainers)]
        while True:
            try:
                t.train_batch(batch)
                break
            except UnavailableError:
                time.sleep(self.cfg.scheduler.probe_interval / 2)
                self.scheduler.tick()
        self.samples_fed += len(batch)

    def start(self, timeout: float = 30.0) -> "Topology":
        if self.started:
            return self
        self.started = True
        for k, client in self.master_clients.items():
            self.scheduler.register("master", k, client.endpoint)
        for k, group in self.groups.items():
            for h in group.replicas:
                self.scheduler.register("slave", k, h.endpoint)
        self.wait_healthy(timeout)
        return self

    def drain(self, timeout: float = 120.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            masters = [c.health() for c in self.master_clients.values()]
            tails = self.log.tails()
            behind = 0
            for group in self.groups.values():
                for h in group.replicas:
                    offs = h.client.health()["offsets"]
                    behind += sum(tails[p] - int(offs.get(str(p), 0)) for p in tails)
            pending = sum(m["pending"] for m in masters)
            if pending == 0 and behind == 0:
                return
            if time.monotonic() > deadline:
                raise TimeoutError(f"drain incomplete: {pending} pending ids, {behind} records behind")
            time.sleep(0.05)

    def consistency_mismatches(self) -> Dict[str, int]:
        """Compare every replica with the masters over every id any trainer has seen, via the wire."""
        ids = sorted(set().union(*(t.seen_ids for t in self.trainers)))
        master_view: Dict[int, dict] = {}
        by_master: Dict[int, List[int]] = {}
        for fid in ids:
            by_master.setdefault(fid % self.num_masters, []).append(fid)
        for k, shard_ids in by_master.items():
            master_view.update(self.master_clients[k].pull_parameters(self.model_id, shard_ids))
        out = {}
        for k, group in sorted(self.groups.items()):
            own = [fid for fid in ids if fid % self.num_slaves == k]
            for h in group.replicas:
                got = h.client.pull_serving(self.model_id, own) if own else {}
                out[h.endpoint] = sum(
                    1 for fid in own if transform_for_serving(self.schema, master_view[fid]) != got[fid]
                )
        return out

    def master_union(self) -> Dict[int, dict]:
        raise NotImplementedError("master tables live in node processes; use consistency_mismatches")

    def counters(self) -> dict:
        return {"samples": self.samples_fed, "bytes_appended": self.log.bytes_appended}

    def _teardown(self) -> None:
        for name in list(self.procs):
            self._kill(name)

    def stop(self) -> None:
        self.scheduler.stop()
        for client in self.master_clients.values():
            client.transport.close()
        self._teardown()
        self.log.close()
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


def run_cluster(cfg: Config, workdir=None, **kw) -> Topology:
    """Launch the topology ``cfg`` describes and block until every component answers HEALTH."""
    cls = ProcessTopology if cfg.cluster.mode == "multi-process" else Topology
    topo = cls(cfg, workdir, **kw)
    try:
        return topo.start()
    except Exception:
        topo.stop()
        raise
