"""Partitioned, offset-addressed append-only log between masters and slaves.

Every append writes one frame holding a batch of encoded update records.
Offsets count records, not frames: a frame of ``n`` records starting at
offset ``b`` covers ``b .. b+n-1``. The byte layout is documented in
``docs/log_format.md``.
"""

from __future__ import annotations

import bisect
import fcntl
import logging
import os
import struct
import threading
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import AppendFailedError, OutOfRangeError, PartitionError

logger = logging.getLogger(__name__)

FLAG_RAW = 0
FLAG_ZLIB = 1

_FRAME_HEAD = struct.Struct("<IBII")  # body length, flag, record count, crc32 of payload
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_FIXED = struct.Struct("<QBQIB")  # feature_id, op, epoch, source_shard, matrix count


class Op(IntEnum):
    UPSERT = 0
    DELETE = 1


@dataclass(frozen=True)
class UpdateRecord:
    feature_id: int
    op: Op
    model_id: str
    source_shard: int
    payload: Mapping[str, Tuple[float, ...]] = field(default_factory=dict)
    epoch: int = 0

    def __post_init__(self):
        object.__setattr__(self, "op", Op(self.op))
        if self.op is Op.DELETE and self.payload:
            raise ValueError("DELETE records carry no payload")


def encode_record(rec: UpdateRecord) -> bytes:
    mid = rec.model_id.encode("utf-8")
    parts = [_U16.pack(len(mid)), mid, _FIXED.pack(rec.feature_id, rec.op, rec.epoch, rec.source_shard, len(rec.payload))]
    for name, values in rec.payload.items():
        nb = name.encode("utf-8")
        parts.append(bytes((len(nb),)))
        parts.append(nb)
        parts.append(_U32.pack(len(values)))
        parts.append(struct.pack(f"<{len(values)}d", *values))
    return b"".join(parts)


_F64: Dict[int, struct.Struct] = {}
_OPS = (Op.UPSERT, Op.DELETE)


def _f64(n: int) -> struct.Struct:
    st = _F64.get(n)
    if st is None:
        st = _F64[n] = struct.Struct(f"<{n}d")
    return st


def _record(fid: int, op: Op, model_id: str, shard: int, payload: dict, epoch: int) -> UpdateRecord:
    # decoded fields are already validated by construction; skip the dataclass __init__
    rec = object.__new__(UpdateRecord)
    rec.__dict__.update(feature_id=fid, op=op, model_id=model_id, source_shard=shard, payload=payload, epoch=epoch)
    return rec


def decode_record(buf: bytes, pos: int = 0, end: Optional[int] = None) -> UpdateRecord:
    if end is None:
        end = len(buf)
    try:
        (mlen,) = _U16.unpack_from(buf, pos)
        pos += 2
        model_id = buf[pos : pos + mlen].decode("utf-8")
        pos += mlen
        fid, op, epoch, shard, count = _FIXED.unpack_from(buf, pos)
        pos += _FIXED.size
        payload = {}
        for _ in range(count):
            nlen = buf[pos]
            pos += 1
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (length,) = _U32.unpack_from(buf, pos)
            pos += 4
            payload[name] = _f64(length).unpack_from(buf, pos)
            pos += 8 * length
        op = _OPS[op]
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise ValueError(f"malformed update record: {exc}") from None
    if pos != end:
        raise ValueError(f"record length mismatch: consumed {pos}, expected {end}")
    if op is Op.DELETE and payload:
        raise ValueError("malformed update record: DELETE with payload")
    return _record(fid, op, model_id, shard, payload, epoch)


def encode_frame(records: Sequence[UpdateRecord], compress: bool = True) -> bytes:
    block = b"".join(_U32.pack(len(r)) + r for r in map(encode_record, records))
    flag = FLAG_RAW
    if compress:
        packed = zlib.compress(block, 1)
        if len(packed) < len(block):
            block, flag = packed, FLAG_ZLIB
    head = _FRAME_HEAD.pack(_FRAME_HEAD.size - 4 + len(block), flag, len(records), zlib.crc32(block))
    return head + block


def decode_frame(frame: bytes) -> List[UpdateRecord]:
    body_len, flag, count, crc = _FRAME_HEAD.unpack_from(frame, 0)
    payload = frame[_FRAME_HEAD.size : 4 + body_len]
    if len(payload) != body_len - (_FRAME_HEAD.size - 4):
        raise ValueError("truncated frame")
    if zlib.crc32(payload) != crc:
        raise ValueError("frame checksum mismatch")
    if flag == FLAG_ZLIB:
        payload = zlib.decompress(payload)
    elif flag != FLAG_RAW:
        raise ValueError(f"unknown frame flag {flag}")
    out = []
    pos = 0
    for _ in range(count):
        (rlen,) = _U32.unpack_from(payload, pos)
        pos += 4
        out.append(decode_record(payload, pos, pos + rlen))
        pos += rlen
    if pos != len(payload):
        raise ValueError("trailing bytes in frame")
    return out


def partition_for_shard(source_shard: int, num_partitions: int) -> int:
    if num_partitions < 1:
        raise ValueError("num_partitions must be >= 1")
    return source_shard % num_partitions


class PartitionedLog:
    """Behaviour shared by both log backends, including stall handling and the decode cache."""

    def __init__(self, num_partitions: int, compress: bool = True, cache_frames: int = 512):
        if num_partitions < 1:
            raise ValueError("num_partitions must be >= 1")
        self.num_partitions = num_partitions
        self.compress = compress
        self.bytes_appended = 0
        self.frames_appended = 0
        self._write_locks = [threading.Lock() for _ in range(num_partitions)]
        self._stalled: Dict[int, float] = {}
        self._fail_next = 0
        self._lose_acks = 0
        self._cache: "OrderedDict[Tuple[int, int], Tuple[UpdateRecord, ...]]" = OrderedDict()
        self._cache_size = cache_frames
        self._cache_lock = threading.Lock()
        self._decoding: Dict[Tuple[int, int], threading.Event] = {}
        self.clock = None

    # failure injection -------------------------------------------------

    def stall(self, partition: int, until: float = float("inf")) -> None:
        """Make appends to ``partition`` fail until ``clock.now() >= until`` (or unstall)."""
        self._check(partition)
        self._stalled[partition] = until

    def unstall(self, partition: Optional[int] = None) -> None:
        if partition is None:
            self._stalled.clear()
        else:
            self._stalled.pop(partition, None)

    def fail_next_appends(self, n: int, after_write: bool = False) -> None:
        """Fail the next ``n`` appends; with ``after_write`` the frame lands first."""
        if after_write:
            self._lose_acks = n
        else:
            self._fail_next = n

    def _check(self, partition: int) -> None:
        if not 0 <= partition < self.num_partitions:
            raise PartitionError(f"partition {partition} does not exist (log has {self.num_partitions})")

    def _check_writable(self, partition: int) -> None:
        if self._fail_next > 0:
            self._fail_next -= 1
            raise AppendFailedError("injected append failure")
        until = self._stalled.get(partition)
        if until is not None:
            now = self.clock.now() if self.clock is not None else None
            if now is None or now < until:
                raise AppendFailedError(f"partition {partition} is stalled")
            self._stalled.pop(partition, None)

    # public API ---------------------------------------------------------

    def append(self, partition: int, batch: Sequence[UpdateRecord]) -> int:
        """Append ``batch`` as one frame; returns the offset of its last record."""
        self._check(partition)
        if not batch:
            raise ValueError("cannot append an empty batch")
        frame = encode_frame(batch, self.compress)
        with self._write_locks[partition]:
            self._check_writable(partition)
            base = self._write_frame(partition, frame, len(batch))
            self.bytes_appended += len(frame)
            self.frames_appended += 1
            if self._lose_acks > 0:
                self._lose_acks -= 1
                raise AppendFailedError("injected lost acknowledgement")
        return base + len(batch) - 1

    def read_from(self, partition: int, start: int, max_records: int = 1 << 30) -> List[Tuple[int, UpdateRecord]]:
        self._check(partition)
        frames = self._frames(partition)
        tail = frames[-1][0] + frames[-1][1] if frames else 0
        if start < 0 or start > tail:
            raise OutOfRangeError(f"start offset {start} beyond tail+1 ({tail}) of partition {partition}")
        out: List[Tuple[int, UpdateRecord]] = []
        if start == tail or max_records <= 0:
            return out
        idx = bisect.bisect_right(frames, (start, float("inf"))) - 1
        stop = min(tail, start + max_records)
        while idx < len(frames) and frames[idx][0] < stop:
            base, count = frames[idx][0], frames[idx][1]
            records = self._frame_records(partition, idx)
            lo = max(start - base, 0)
            hi = min(stop - base, count)
            out.extend((base + i, records[i]) for i in range(lo, hi))
            idx += 1
        return out

    def tail(self, partition: int) -> int:
        self._check(partition)
        frames = self._frames(partition)
        return frames[-1][0] + frames[-1][1] if frames else 0

    def tails(self) -> Dict[int, int]:
        return {p: self.tail(p) for p in range(self.num_partitions)}

    def _frame_records(self, partition: int, idx: int) -> Tuple[UpdateRecord, ...]:
        """Decoded records of one frame. Concurrent readers of a missing frame decode it once."""
        key = (partition, idx)
        while True:
            with self._cache_lock:
                hit = self._cache.get(key)
                if hit is not None:
                    self._cache.move_to_end(key)
                    return hit
                pending = self._decoding.get(key)
                if pending is None:
                    pending = self._decoding[key] = threading.Event()
                    break
            pending.wait()
        try:
            records = tuple(decode_frame(self._frame_bytes(partition, idx)))
            with self._cache_lock:
                self._cache[key] = records
                if len(self._cache) > self._cache_size:
                    self._cache.popitem(last=False)
            return records
        finally:
            with self._cache_lock:
                del self._decoding[key]
            pending.set()

    # backend hooks ------------------------------------------------------

    def _write_frame(self, partition: int, frame: bytes, count: int) -> int:
        raise NotImplementedError

    def _frames(self, partition: int) -> List[Tuple[int, int, int]]:
        """(base offset, record count, locator) per frame, in order."""
        raise NotImplementedError

    def _frame_bytes(self, partition: int, idx: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class MemoryLog(PartitionedLog):
    def __init__(self, num_partitions: int, compress: bool = True, cache_frames: int = 512):
        super().__init__(num_partitions, compress, cache_frames)
        self._index: List[List[Tuple[int, int, int]]] = [[] for _ in range(num_partitions)]
        self._data: List[List[bytes]] = [[] for _ in range(num_partitions)]

    def _write_frame(self, partition, frame, count):
        index = self._index[partition]
        base = index[-1][0] + index[-1][1] if index else 0
        self._data[partition].append(frame)
        index.append((base, count, len(self._data[partition]) - 1))
        return base

    def _frames(self, partition):
        return self._index[partition]

    def _frame_bytes(self, partition, idx):
        return self._data[partition][idx]


class FileLog(PartitionedLog):
    """One append-only file per partition at ``<log_dir>/<model_id>/partition-<k>.log``.

    Several processes may append to the same partition; writers serialise on an
    advisory file lock and every reader picks up frames written by others on
    its next call.
    """

    def __init__(self, log_dir, model_id: str, num_partitions: int, compress: bool = True, fsync: bool = True, cache_frames: int = 512):
        super().__init__(num_partitions, compress, cache_frames)
        self.root = Path(log_dir) / model_id
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._paths = [self.root / f"partition-{k}.log" for k in range(num_partitions)]
        for p in self._paths:
            p.touch(exist_ok=True)
        self._index: List[List[Tuple[int, int, int]]] = [[] for _ in range(num_partitions)]
        self._scanned = [0] * num_partitions
        self._scan_locks = [threading.Lock() for _ in range(num_partitions)]

    def path(self, partition: int) -> Path:
        return self._paths[partition]

    def _refresh(self, partition: int) -> None:
        with self._scan_locks[partition]:
            path = self._paths[partition]
            size = path.stat().st_size
            pos = self._scanned[partition]
            if size <= pos:
                return
            index = self._index[partition]
            base = index[-1][0] + index[-1][1] if index else 0
            with open(path, "rb") as fh:
                fh.seek(pos)
                while pos + _FRAME_HEAD.size <= size:
                    head = fh.read(_FRAME_HEAD.size)
                    body_len, _, count, _ = _FRAME_HEAD.unpack(head)
                    if pos + 4 + body_len > size:
                        break  # frame still being written by another process
                    index.append((base, count, pos))
                    base += count
                    pos += 4 + body_len
                    fh.seek(pos)
            self._scanned[partition] = pos

    def _write_frame(self, partition, frame, count):
        path = self._paths[partition]
        with open(path, "ab") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                self._refresh(partition)
                index = self._index[partition]
                base = index[-1][0] + index[-1][1] if index else 0
                fh.write(frame)
                fh.flush()
                if self.fsync:
                    os.fsync(fh.fileno())
                self._refresh(partition)
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        return base

    def _frames(self, partition):
        self._refresh(partition)
        return self._index[partition]

    def _frame_bytes(self, partition, idx):
        pos = self._index[partition][idx][2]
        with open(self._paths[partition], "rb") as fh:
            fh.seek(pos)
            head = fh.read(_FRAME_HEAD.size)
            (body_len,) = _U32.unpack_from(head)
            return head + fh.read(body_len - (_FRAME_HEAD.size - 4))


def open_log(backend: str, num_partitions: int, model_id: str = "model", log_dir=None, compress: bool = True, fsync: bool = True) -> PartitionedLog:
    if backend == "memory":
        return MemoryLog(num_partitions, compress)
    if backend == "file":
        if log_dir is None:
            raise ValueError("file log backend needs log_dir")
        return FileLog(log_dir, model_id, num_partitions, compress, fsync)
    raise ValueError(f"unknown log backend {backend!r}")


def fold_records(records: Iterable[UpdateRecord], table: Optional[Dict[int, dict]] = None) -> Dict[int, dict]:
    """Apply full-value records in order to a plain id -> slot map."""
    table = {} if table is None else table
    for rec in records:
        if rec.op is Op.UPSERT:
            table[rec.feature_id] = dict(rec.payload)
        else:
            table.pop(rec.feature_id, None)
    return table
