import struct
import threading
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fold_serving
from weips.clock import LogicalClock
from weips.errors import AppendFailedError, OutOfRangeError, PartitionError
from weips.plog import (
    FLAG_RAW,
    FLAG_ZLIB,
    FileLog,
    MemoryLog,
    Op,
    UpdateRecord,
    decode_frame,
    decode_record,
    encode_frame,
    encode_record,
    fold_records,
    open_log,
    partition_for_shard,
)


def rec(fid, w=1.0, op=Op.UPSERT, shard=0, epoch=1, model="m"):
    payload = {"w": (w,)} if op is Op.UPSERT else {}
    return UpdateRecord(fid, op, model, shard, payload, epoch)


@pytest.fixture(params=["memory", "file"])
def log(request, tmp_path):
    lg = open_log(request.param, 4, "m", tmp_path, fsync=False)
    yield lg
    lg.close()


# offsets ---------------------------------------------------------------------


def test_batch_of_three_returns_last_offset(log):
    assert log.append(0, [rec(1), rec(2), rec(3)]) == 2


def test_single_appends_are_consecutive(log):
    assert log.append(1, [rec(1)]) == 0
    assert log.append(1, [rec(2)]) == 1


def test_nonexistent_partition(log):
    with pytest.raises(PartitionError):
        log.append(9, [rec(1)])
    with pytest.raises(PartitionError):
        log.read_from(9, 0)


def test_empty_batch_rejected(log):
    with pytest.raises(ValueError):
        log.append(0, [])


def test_read_from_examples(log):
    for i in range(3):
        log.append(2, [rec(i)])
    got = log.read_from(2, 0, 10)
    assert [o for o, _ in got] == [0, 1, 2]
    assert [r.feature_id for _, r in got] == [0, 1, 2]
    assert log.read_from(2, 3) == []
    with pytest.raises(OutOfRangeError):
        log.read_from(2, 4)


def test_read_from_mid_frame_and_limit(log):
    log.append(0, [rec(i) for i in range(10)])
    log.append(0, [rec(i) for i in range(10, 15)])
    got = log.read_from(0, 7, 5)
    assert [o for o, _ in got] == [7, 8, 9, 10, 11]


def test_replay_is_byte_identical(log):
    log.append(3, [rec(i, w=i * 0.5) for i in range(20)])
    a = [encode_record(r) for _, r in log.read_from(3, 4)]
    b = [encode_record(r) for _, r in log.read_from(3, 4)]
    assert a == b


def test_tail(log):
    assert log.tail(0) == 0
    for i in range(5):
        log.append(0, [rec(i)])
    assert log.tail(0) == 5
    assert log.tails() == {0: 5, 1: 0, 2: 0, 3: 0}


def test_partition_for_shard():
    assert partition_for_shard(7, 4) == 3
    assert partition_for_shard(0, 5) == 0
    assert all(partition_for_shard(k * 6, 6) == 0 for k in range(10))
    with pytest.raises(ValueError):
        partition_for_shard(1, 0)


# failure injection ---------------------------------------------------------------


def test_injected_failure_writes_nothing(log):
    log.fail_next_appends(1)
    with pytest.raises(AppendFailedError):
        log.append(0, [rec(1)])
    assert log.tail(0) == 0
    assert log.append(0, [rec(1)]) == 0


def test_lost_ack_leaves_the_frame(log):
    log.fail_next_appends(1, after_write=True)
    with pytest.raises(AppendFailedError):
        log.append(0, [rec(1)])
    assert log.tail(0) == 1


def test_stall_until_clock():
    clock = LogicalClock()
    lg = MemoryLog(2)
    lg.clock = clock
    lg.stall(1, until=5.0)
    with pytest.raises(AppendFailedError):
        lg.append(1, [rec(1)])
    assert lg.append(0, [rec(1)]) == 0
    clock.advance(5.0)
    assert lg.append(1, [rec(1)]) == 0


def test_unstall():
    lg = MemoryLog(1)
    lg.stall(0)
    with pytest.raises(AppendFailedError):
        lg.append(0, [rec(1)])
    lg.unstall()
    assert lg.append(0, [rec(1)]) == 0


# file backend ------------------------------------------------------------------


def test_file_layout_and_durability(tmp_path):
    lg = FileLog(tmp_path, "ctr", 2, fsync=True)
    lg.append(1, [rec(5, 2.5), rec(6, op=Op.DELETE)])
    lg.close()
    assert (tmp_path / "ctr" / "partition-0.log").exists()
    assert (tmp_path / "ctr" / "partition-1.log").stat().st_size > 0
    reopened = FileLog(tmp_path, "ctr", 2)
    got = reopened.read_from(1, 0)
    assert [(o, r) for o, r in got] == [(0, rec(5, 2.5)), (1, rec(6, op=Op.DELETE))]
    assert reopened.append(1, [rec(7)]) == 2


def test_second_writer_sees_other_writers_frames(tmp_path):
    a = FileLog(tmp_path, "m", 1, fsync=False)
    b = FileLog(tmp_path, "m", 1, fsync=False)
    a.append(0, [rec(1)])
    assert b.append(0, [rec(2)]) == 1
    assert [r.feature_id for _, r in a.read_from(0, 0)] == [1, 2]


def test_frame_header_layout_is_documented_format():
    records = [rec(1, 0.25)]
    frame = encode_frame(records, compress=False)
    body_len, flag, count, crc = struct.unpack_from("<IBII", frame)
    assert flag == FLAG_RAW and count == 1
    assert body_len == len(frame) - 4
    block = frame[13:]
    assert zlib.crc32(block) == crc
    (rlen,) = struct.unpack_from("<I", block)
    assert decode_record(block, 4, 4 + rlen) == records[0]


def test_compressed_frame_round_trip():
    records = [rec(i, 1.0) for i in range(200)]
    frame = encode_frame(records, compress=True)
    assert frame[4] == FLAG_ZLIB
    assert decode_frame(frame) == records


def test_corrupt_frame_detected():
    frame = bytearray(encode_frame([rec(1)], compress=False))
    frame[-1] ^= 0xFF
    with pytest.raises(ValueError):
        decode_frame(bytes(frame))


def test_unknown_backend():
    with pytest.raises(ValueError):
        open_log("kafka", 1)


# concurrency -------------------------------------------------------------------------


def test_concurrent_appenders_keep_per_writer_order(log):
    def writer(w):
        for i in range(200):
            log.append(0, [rec(w * 1000 + i, shard=w)])

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = log.read_from(0, 0)
    assert [o for o, _ in got] == list(range(800))
    for w in range(4):
        seq = [r.feature_id for _, r in got if r.source_shard == w]
        assert seq == sorted(seq) and len(seq) == 200


# records ----------------------------------------------------------------------------


def test_delete_carries_no_payload():
    with pytest.raises(ValueError):
        UpdateRecord(1, Op.DELETE, "m", 0, {"w": (1.0,)})


def test_truncated_record_rejected():
    data = encode_record(rec(3))
    with pytest.raises(ValueError):
        decode_record(data[:-3])


floats = st.floats(allow_nan=False)
payloads = st.dictionaries(
    st.text(min_size=1, max_size=8).filter(lambda s: len(s.encode()) < 256),
    st.lists(floats, min_size=1, max_size=6).map(tuple),
    min_size=1,
    max_size=4,
)
records = st.one_of(
    st.builds(
        UpdateRecord,
        st.integers(0, 2**64 - 1),
        st.just(Op.UPSERT),
        st.text(min_size=1, max_size=10),
        st.integers(0, 2**32 - 1),
        payloads,
        st.integers(0, 2**64 - 1),
    ),
    st.builds(
        UpdateRecord,
        st.integers(0, 2**64 - 1),
        st.just(Op.DELETE),
        st.text(min_size=1, max_size=10),
        st.integers(0, 2**32 - 1),
        st.just({}),
        st.integers(0, 2**64 - 1),
    ),
)


@settings(max_examples=10_000, deadline=None)
@given(records)
def test_record_round_trip(r):
    assert decode_record(encode_record(r)) == r


@settings(max_examples=200, deadline=None)
@given(st.lists(records, min_size=1, max_size=30), st.booleans())
def test_frame_round_trip(batch, compress):
    assert decode_frame(encode_frame(batch, compress)) == batch


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.booleans(), floats), max_size=60))
def test_replay_fold_is_deterministic_and_idempotent(ops):
    recs = [rec(fid, w) if up else rec(fid, op=Op.DELETE) for fid, up, w in ops]
    once = fold_records(recs)
    assert fold_records(recs) == once
    # applying the whole sequence again on top changes nothing (full values)
    assert fold_records(recs, dict(once)) == once
    assert once == fold_serving(recs)
