"""On-disk checkpoint store.

Layout under a destination root::

    <root>/<model_id>/v<version>/shard-<k>.ckpt   binary body
    <root>/<model_id>/v<version>/shard-<k>.json   per-shard meta, written after the body is fsynced
    <root>/<model_id>/v<version>/meta.json        manifest, written only once every shard succeeded

A version is visible (complete) only when ``meta.json`` exists.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core_model import ModelSchema, Slot
from .errors import CorruptCheckpointError, IncompleteCheckpointError

MAGIC = b"WPSCKPT1"
_HEAD = struct.Struct("<8sQQB")  # magic, epoch, feature count, matrix count


@dataclass
class CheckpointMeta:
    model_id: str
    shard_id: int
    num_shards: int
    version: int
    created_at: float
    log_offsets: Dict[int, int]
    param_count: int
    content_digest: int
    epoch: int = 0
    dest: str = "local"
    schema: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["log_offsets"] = {str(k): v for k, v in self.log_offsets.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CheckpointMeta":
        d = dict(d)
        d["log_offsets"] = {int(k): int(v) for k, v in d["log_offsets"].items()}
        return cls(**d)


@dataclass
class ShardSnapshot:
    """Training-view contents of one shard at one epoch boundary."""

    slots: Dict[int, Slot]
    touched: Dict[int, int]
    epoch: int
    # ids changed but not yet emitted to the log when the snapshot was taken
    dirty: List[int] = field(default_factory=list)


def digest(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def encode_body(schema: ModelSchema, snap: ShardSnapshot) -> bytes:
    ids = sorted(snap.slots)
    n = len(ids)
    widths = schema.widths
    names = schema.training_names
    parts = [_HEAD.pack(MAGIC, snap.epoch, n, len(names))]
    for name in names:
        nb = name.encode()
        parts.append(bytes((len(nb),)) + nb + struct.pack("<I", widths[name]))
    parts.append(np.asarray(ids, dtype="<u8").tobytes())
    parts.append(np.asarray([snap.touched.get(i, 0) for i in ids], dtype="<u8").tobytes())
    dirty = sorted(set(snap.dirty))
    parts.append(struct.pack("<Q", len(dirty)))
    parts.append(np.asarray(dirty, dtype="<u8").tobytes())
    for name in names:
        w = widths[name]
        arr = np.empty((n, w), dtype="<f8")
        for row, fid in enumerate(ids):
            arr[row] = snap.slots[fid][name]
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_body(data: bytes) -> Tuple[Dict[str, int], ShardSnapshot]:
    try:
        magic, epoch, n, m = _HEAD.unpack_from(data, 0)
        if magic != MAGIC:
            raise ValueError("bad magic")
        pos = _HEAD.size
        widths: Dict[str, int] = {}
        for _ in range(m):
            nlen = data[pos]
            name = data[pos + 1 : pos + 1 + nlen].decode()
            pos += 1 + nlen
            (widths[name],) = struct.unpack_from("<I", data, pos)
            pos += 4
        ids = np.frombuffer(data, dtype="<u8", count=n, offset=pos).tolist()
        pos += 8 * n
        touched = np.frombuffer(data, dtype="<u8", count=n, offset=pos).tolist()
        pos += 8 * n
        (nd,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        dirty = np.frombuffer(data, dtype="<u8", count=nd, offset=pos).tolist()
        pos += 8 * nd
        cols = {}
        for name, w in widths.items():
            arr = np.frombuffer(data, dtype="<f8", count=n * w, offset=pos).reshape(n, w)
            cols[name] = [tuple(row) for row in arr.tolist()]
            pos += 8 * n * w
        if pos != len(data):
            raise ValueError("trailing bytes")
    except (ValueError, struct.error, IndexError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"undecodable checkpoint body: {exc}") from None
    slots = {fid: {name: cols[name][row] for name in widths} for row, fid in enumerate(ids)}
    return widths, ShardSnapshot(slots, dict(zip(ids, touched)), int(epoch), dirty)


class CheckpointStore:
    """Checkpoints of every model under one destination directory."""

    def __init__(self, root, dest: str = "local"):
        self.root = Path(root)
        self.dest = dest
        self.root.mkdir(parents=True, exist_ok=True)

    def version_dir(self, model_id: str, version: int) -> Path:
        return self.root / model_id / f"v{version}"

    def shard_path(self, model_id: str, version: int, shard_id: int) -> Path:
        return self.version_dir(model_id, version) / f"shard-{shard_id}.ckpt"

    def write_shard(
        self,
        model_id: str,
        shard_id: int,
        num_shards: int,
        version: int,
        schema: ModelSchema,
        snap: ShardSnapshot,
        log_offsets: Mapping[int, int],
        created_at: float,
    ) -> CheckpointMeta:
        body = encode_body(schema, snap)
        vdir = self.version_dir(model_id, version)
        vdir.mkdir(parents=True, exist_ok=True)
        path = vdir / f"shard-{shard_id}.ckpt"
        tmp = path.with_suffix(".ckpt.tmp")
        with open(tmp, "wb") as fh:
            fh.write(body)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        meta = CheckpointMeta(
            model_id=model_id,
            shard_id=shard_id,
            num_shards=num_shards,
            version=version,
            created_at=created_at,
            log_offsets=dict(log_offsets),
            param_count=len(snap.slots),
            content_digest=digest(body),
            epoch=snap.epoch,
            dest=self.dest,
            schema=schema.to_dict(),
        )
        _write_json(vdir / f"shard-{shard_id}.json", meta.to_dict())
        return meta

    def read_shard_meta(self, model_id: str, version: int, shard_id: int) -> CheckpointMeta:
        path = self.version_dir(model_id, version) / f"shard-{shard_id}.json"
        if not path.exists():
            raise IncompleteCheckpointError(f"missing meta for shard {shard_id} of v{version}")
        return CheckpointMeta.from_dict(json.loads(path.read_text()))

    def read_shard(self, model_id: str, version: int, shard_id: int) -> Tuple[CheckpointMeta, ShardSnapshot]:
        meta = self.read_shard_meta(model_id, version, shard_id)
        path = self.shard_path(model_id, version, shard_id)
        if not path.exists():
            raise IncompleteCheckpointError(f"missing body for shard {shard_id} of v{version}")
        data = path.read_bytes()
        if digest(data) != meta.content_digest:
            raise CorruptCheckpointError(f"digest mismatch for shard {shard_id} of v{version}")
        _, snap = decode_body(data)
        return meta, snap

    def commit_version(self, model_id: str, version: int, metas: Sequence[CheckpointMeta]) -> dict:
        """Publish a complete checkpoint set by writing its manifest."""
        if not metas:
            raise IncompleteCheckpointError("no shard metas to commit")
        num_shards = metas[0].num_shards
        shards = sorted(m.shard_id for m in metas)
        if shards != list(range(num_shards)):
            raise IncompleteCheckpointError(f"v{version} has shards {shards}, expected 0..{num_shards - 1}")
        manifest = {
            "model_id": model_id,
            "version": version,
            "num_shards": num_shards,
            "dest": self.dest,
            "created_at": max(m.created_at for m in metas),
            "log_offsets": {str(p): min(m.log_offsets[p] for m in metas) for p in metas[0].log_offsets},
            "param_count": sum(m.param_count for m in metas),
            "schema": metas[0].schema,
            "shards": [m.to_dict() for m in sorted(metas, key=lambda m: m.shard_id)],
        }
        _write_json(self.version_dir(model_id, version) / "meta.json", manifest)
        return manifest

    def manifest(self, model_id: str, version: int) -> dict:
        path = self.version_dir(model_id, version) / "meta.json"
        if not path.exists():
            raise IncompleteCheckpointError(f"v{version} of {model_id} is not complete in {self.dest}")
        return json.loads(path.read_text())

    def has_version(self, model_id: str, version: int) -> bool:
        return (self.version_dir(model_id, version) / "meta.json").exists()

    def versions(self, model_id: str) -> List[int]:
        base = self.root / model_id
        if not base.exists():
            return []
        out = []
        for d in base.iterdir():
            if d.is_dir() and d.name.startswith("v") and d.name[1:].isdigit() and (d / "meta.json").exists():
                out.append(int(d.name[1:]))
        return sorted(out)

    def corrupt_shard(self, model_id: str, version: int, shard_id: int) -> None:
        """Flip one byte of a shard body (fault injection)."""
        path = self.shard_path(model_id, version, shard_id)
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0xFF
        path.write_bytes(bytes(data))


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def find_version(stores: Sequence[CheckpointStore], model_id: str, version: int) -> Optional[CheckpointStore]:
    for store in stores:
        if store.has_version(model_id, version):
            return store
    return None


def all_versions(stores: Sequence[CheckpointStore], model_id: str) -> List[int]:
    return sorted({v for s in stores for v in s.versions(model_id)})
