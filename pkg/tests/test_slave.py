from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fold_serving
from weips.checkpoint import CheckpointStore
from weips.clock import LogicalClock
from weips.core_model import ModelSchema
from weips.errors import RecoveryNeededError, RoutingError, ShardDownError, UnavailableError
from weips.master import GatherConfig, MasterShard
from weips.plog import MemoryLog, Op, UpdateRecord
from weips.slave import ReplicaGroup, ReplicaHandle, ServingClient, SlaveReplica, replica_route

LR = ModelSchema.lr_ftrl()


def up(fid, w, shard=0):
    return UpdateRecord(fid, Op.UPSERT, "m", shard, {"w": (w,)}, 1)


def delete(fid, shard=0):
    return UpdateRecord(fid, Op.DELETE, "m", shard, {}, 1)


def replica(log, shard=0, n=1, **kw):
    return SlaveReplica("m", shard, n, LR, log, **kw)


# scatter -------------------------------------------------------------------------


def test_replaying_a_batch_twice_is_idempotent():
    log = MemoryLog(1)
    batch = [up(1, 0.5), up(2, -1.0), up(1, 0.25)]
    log.append(0, batch)
    log.append(0, batch)
    a, b = replica(log), replica(log)
    a.scatter_step(max_batch=3)
    b.catch_up()
    assert a.table.slots == b.table.slots == {1: {"w": (0.25,)}, 2: {"w": (-1.0,)}}


def test_upsert_then_delete():
    log = MemoryLog(1)
    log.append(0, [up(5, 1.0), delete(5)])
    r = replica(log)
    r.catch_up()
    assert 5 not in r.table.slots


def test_other_shards_records_skipped_but_consumed():
    log = MemoryLog(2)
    log.append(0, [up(0, 1.0), up(1, 1.0)])
    log.append(1, [up(3, 1.0)])
    r = replica(log, shard=1, n=2)
    r.catch_up()
    assert set(r.table.slots) == {1, 3}
    assert r.table.consumed_offsets == {0: 2, 1: 1}
    assert r.skipped == 1 and r.lag() == 0


def test_ten_masters_to_twenty_slaves_union():
    log = MemoryLog(4)
    clock = LogicalClock()
    masters = [MasterShard("m", k, 10, LR, log, GatherConfig(), clock) for k in range(10)]
    for fid in range(500):
        masters[fid % 10].push_gradients("m", {fid: {"w": (0.01 * (fid + 1),)}})
    for m in masters:
        m.flush()
    slaves = [replica(log, k, 20) for k in range(20)]
    for s in slaves:
        s.catch_up()
    seen = Counter(fid for s in slaves for fid in s.table.slots)
    assert set(seen) == set(range(500)) and set(seen.values()) == {1}
    union = {fid: {"w": s["w"]} for m in masters for fid, s in m.table.slots.items()}
    assert {fid: slot for s in slaves for fid, slot in s.table.slots.items()} == union


def test_out_of_range_offset_needs_recovery():
    log = MemoryLog(1)
    r = replica(log)
    r.table.consumed_offsets[0] = 5
    with pytest.raises(RecoveryNeededError):
        r.scatter_step()


def test_records_of_other_models_ignored():
    log = MemoryLog(1)
    log.append(0, [UpdateRecord(1, Op.UPSERT, "other", 0, {"w": (1.0,)})])
    r = replica(log)
    r.catch_up()
    assert r.table.slots == {} and r.table.consumed_offsets == {0: 1}


# transform hook ------------------------------------------------------------------------


def test_identity_and_doubling_hooks():
    log = MemoryLog(1)
    log.append(0, [up(1, 1.5)])
    plain = replica(log)
    doubled = replica(log, hook=lambda rec: {"w": tuple(2 * x for x in rec.payload["w"])})
    plain.catch_up()
    doubled.catch_up()
    assert plain.table.slots[1] == {"w": (1.5,)}
    assert doubled.table.slots[1] == {"w": (3.0,)}


def test_malformed_payload_is_quarantined():
    log = MemoryLog(1)
    log.append(0, [up(1, 1.0), UpdateRecord(2, Op.UPSERT, "m", 0, {"w": (1.0, 2.0)}), UpdateRecord(3, Op.UPSERT, "m", 0, {"q": (1.0,)}), up(4, 2.0)])
    r = replica(log)
    r.catch_up()
    assert set(r.table.slots) == {1, 4}
    assert r.quarantined == 2


# serving ------------------------------------------------------------------------------


def test_pull_serving_examples():
    log = MemoryLog(1)
    log.append(0, [up(4, 0.5), up(4, 0.75)])
    r = replica(log, shard=0, n=2)
    r.catch_up()
    assert r.pull_serving("m", [4, 6]) == {4: {"w": (0.75,)}, 6: {"w": (0.0,)}}
    with pytest.raises(RoutingError):
        r.pull_serving("m", [5])
    r.kill()
    with pytest.raises(UnavailableError):
        r.pull_serving("m", [4])


class FakeClient:
    def __init__(self, name, table=None, fail=False):
        self.name = name
        self.fail = fail
        self.table = table or {}

    def pull_serving(self, model_id, ids):
        if self.fail:
            raise UnavailableError(self.name)
        return {i: self.table.get(i, {"w": (0.0,)}) for i in ids}


def group_of(*handles):
    return ReplicaGroup(0, handles)


def test_round_robin():
    g = group_of(ReplicaHandle("a", None), ReplicaHandle("b", None))
    assert Counter(replica_route(g, k).endpoint for k in range(4)) == {"a": 2, "b": 2}


def test_unhealthy_replica_excluded():
    g = group_of(ReplicaHandle("a", None, healthy=False), ReplicaHandle("b", None))
    assert {replica_route(g, k).endpoint for k in range(4)} == {"b"}
    g.replicas[1].switching = True
    with pytest.raises(ShardDownError):
        replica_route(g, 0)


def test_client_retries_once_on_another_replica():
    g = group_of(ReplicaHandle("a", FakeClient("a", fail=True)), ReplicaHandle("b", FakeClient("b", {2: {"w": (1.0,)}})))
    client = ServingClient("m", {0: g})
    client.record_routes = True
    for _ in range(4):
        assert client.pull([2]) == {2: {"w": (1.0,)}}
    assert [ep for _, ep in client.routed].count("b") == 4


def test_client_gives_up_after_retry_budget():
    g = group_of(ReplicaHandle("a", FakeClient("a", fail=True)), ReplicaHandle("b", FakeClient("b", fail=True)))
    with pytest.raises(UnavailableError):
        ServingClient("m", {0: g}).pull([0])


def test_group_rejects_duplicate_endpoint():
    g = group_of(ReplicaHandle("a", None))
    with pytest.raises(ValueError):
        g.add(ReplicaHandle("a", None))
    g.remove("a")
    assert not g.servable


# versions -------------------------------------------------------------------------------


@pytest.fixture
def versioned(tmp_path):
    """A one-shard model with checkpoints v1 and v2 and log records after each."""
    log = MemoryLog(1)
    store = CheckpointStore(tmp_path, "local")
    m = MasterShard("m", 0, 1, LR, log, GatherConfig(), LogicalClock(), {"local": store})
    for v in (1, 2):
        m.push_gradients("m", {fid: {"w": (0.1 * v,)} for fid in range(v * 5)})
        m.flush()
        store.commit_version("m", v, [m.save_checkpoint("local", v)])
    m.push_gradients("m", {3: {"w": (1.0,)}, 20: {"w": (-1.0,)}})
    m.flush()
    return log, store, m


def test_load_then_replay_matches_continuous_replica(versioned):
    log, store, m = versioned
    continuous = replica(log)
    continuous.catch_up()
    cold = replica(log, stores=[store], replica_id=1)
    cold.load_version(1)
    cold.catch_up()
    assert cold.table.consumed_offsets == continuous.table.consumed_offsets
    assert cold.table.slots == continuous.table.slots


def test_snapshot_plus_replay_oracle(versioned):
    log, store, m = versioned
    r = replica(log, stores=[store])
    t = r.load_version(2, hold=True)
    _, snap = store.read_shard("m", 2, 0)
    base = {fid: {"w": s["w"]} for fid, s in snap.slots.items()}
    assert t.slots == base and r.held
    assert r.scatter_step() == 0
    r.release()
    r.catch_up()
    offset = store.manifest("m", 2)["log_offsets"]["0"]
    assert r.table.slots == fold_serving([rec for _, rec in log.read_from(0, offset)], base=base)


def test_load_at_tail_has_nothing_to_replay(tmp_path):
    log = MemoryLog(1)
    store = CheckpointStore(tmp_path, "local")
    m = MasterShard("m", 0, 1, LR, log, GatherConfig(), LogicalClock(), {"local": store})
    m.push_gradients("m", {1: {"w": (1.0,)}})
    m.flush()
    store.commit_version("m", 1, [m.save_checkpoint("local", 1)])
    r = replica(log, stores=[store])
    r.load_version(1)
    assert r.catch_up() == 0
    assert r.table.slots == {1: {"w": m.table.slots[1]["w"]}}


def test_corrupt_version_falls_back(versioned):
    log, store, _ = versioned
    store.corrupt_shard("m", 2, 0)
    r = replica(log, stores=[store])
    assert r.load_version(2).version == 1


def test_no_loadable_version_is_shard_down(versioned):
    log, store, _ = versioned
    store.corrupt_shard("m", 1, 0)
    store.corrupt_shard("m", 2, 0)
    with pytest.raises(ShardDownError):
        replica(log, stores=[store]).load_version(2)


def test_version_zero_is_empty_model(versioned):
    log, store, _ = versioned
    r = replica(log, stores=[store])
    t = r.load_version(0)
    assert t.slots == {} and t.consumed_offsets == {0: 0}


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 12), st.booleans(), st.floats(-5, 5)), min_size=1, max_size=50),
    st.integers(1, 7),
)
def test_replicas_converge_regardless_of_batching(ops, batch):
    log = MemoryLog(1)
    for fid, keep, w in ops:
        log.append(0, [up(fid, w) if keep else delete(fid)])
    a, b = replica(log), replica(log, replica_id=1)
    a.catch_up()
    while b.scatter_step(max_batch=batch) or b.lag():
        pass
    assert a.table.consumed_offsets == b.table.consumed_offsets
    assert a.table.slots == b.table.slots == fold_serving(r for _, r in log.read_from(0, 0))
