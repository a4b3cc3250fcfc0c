"""Request/response protocol spoken by every networked component.

A frame is a 4-byte big-endian body length followed by the body: canonical
JSON (sorted keys, no whitespace, ASCII, finite floats only). Every request
carries ``type``; every response carries ``ok`` and, on failure, ``error``
(an error kind) and ``message``. Field-by-field reference: docs/wire_protocol.md.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import ERROR_KINDS, UnavailableError, WeipsError

logger = logging.getLogger(__name__)

PUSH_GRAD = "PUSH_GRAD"
PULL_PARAMS = "PULL_PARAMS"
SAVE_CKPT = "SAVE_CKPT"
LOAD_CKPT = "LOAD_CKPT"
HEALTH = "HEALTH"
PULL_SERVING = "PULL_SERVING"
LOAD_VERSION = "LOAD_VERSION"
SWITCH_VERSION = "SWITCH_VERSION"
TRIGGER_CKPT = "TRIGGER_CKPT"
STATUS = "STATUS"
SHUTDOWN = "SHUTDOWN"

_LEN = struct.Struct(">I")
MAX_FRAME = 1 << 30

Handler = Callable[[dict], dict]


def encode_message(msg: Mapping) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("ascii")
    return _LEN.pack(len(body)) + body


def decode_message(frame: bytes) -> dict:
    (n,) = _LEN.unpack_from(frame, 0)
    body = frame[4 : 4 + n]
    if len(body) != n:
        raise ValueError("truncated frame")
    return json.loads(body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> dict:
    head = _recv_exact(sock, 4)
    (n,) = _LEN.unpack(head)
    if n > MAX_FRAME:
        raise ValueError(f"frame of {n} bytes exceeds limit")
    return json.loads(_recv_exact(sock, n))


def error_response(exc: Exception) -> dict:
    kind = exc.kind if isinstance(exc, WeipsError) else "error"
    return {"ok": False, "error": kind, "message": str(exc)}


def raise_for(resp: Mapping) -> Mapping:
    if resp.get("ok"):
        return resp
    cls = ERROR_KINDS.get(resp.get("error"), WeipsError)
    raise cls(resp.get("message", "request failed"))


def slots_to_wire(slots: Mapping[int, Mapping[str, Sequence[float]]]) -> List[list]:
    return [[fid, {name: list(v) for name, v in slot.items()}] for fid, slot in slots.items()]


def slots_from_wire(items) -> Dict[int, Dict[str, Tuple[float, ...]]]:
    return {int(fid): {name: tuple(v) for name, v in slot.items()} for fid, slot in items}


# node-side dispatch ----------------------------------------------------------


def master_handler(shard) -> Handler:
    def handle(msg: dict) -> dict:
        t = msg.get("type")
        try:
            if t == PUSH_GRAD:
                updates = {int(fid): g for fid, g in msg["updates"]}
                ack = shard.push_gradients(msg["model_id"], updates)
                return {"ok": True, "applied": ack.applied_count, "epoch": ack.epoch, "rejected": ack.rejected}
            if t == PULL_PARAMS:
                slots = shard.pull_parameters(msg["model_id"], [int(i) for i in msg["ids"]])
                return {"ok": True, "slots": slots_to_wire(slots)}
            if t == SAVE_CKPT:
                meta = shard.save_checkpoint(msg.get("dest", "local"), msg.get("version"))
                return {"ok": True, "meta": meta.to_dict()}
            if t == LOAD_CKPT:
                from .master import load_checkpoint

                stores = [shard.stores[d] for d in ("local", "remote-sim") if d in shard.stores]
                tables = load_checkpoint(stores, shard.model_id, int(msg["version"]), shard.num_shards, only_shard=shard.shard_id)
                table = tables[shard.shard_id]
                offsets = None
                if msg.get("reconcile", True):
                    from .master import checkpoint_offsets

                    offsets = checkpoint_offsets(stores, shard.model_id, int(msg["version"]), shard.shard_id)
                n = shard.restore(table, offsets, table.dirty_at_snapshot)
                return {"ok": True, "param_count": len(table), "epoch": table.epoch, "reannounced": n}
            if t == HEALTH:
                return {"ok": True, **shard.health()}
            return {"ok": False, "error": "error", "message": f"unknown message type {t!r} for master"}
        except Exception as exc:  # noqa: BLE001 - every failure becomes an error response
            return error_response(exc)

    return handle


def slave_handler(replica) -> Handler:
    def handle(msg: dict) -> dict:
        t = msg.get("type")
        try:
            if t == PULL_SERVING:
                slots = replica.pull_serving(msg["model_id"], [int(i) for i in msg["ids"]])
                return {"ok": True, "slots": slots_to_wire(slots)}
            if t == LOAD_VERSION or t == SWITCH_VERSION:
                table = replica.load_version(int(msg["version"]), hold=bool(msg.get("hold", False)))
                return {"ok": True, "version": table.version, "offsets": {str(p): o for p, o in table.consumed_offsets.items()}}
            if t == HEALTH:
                h = replica.health()
                h["offsets"] = {str(p): o for p, o in h["offsets"].items()}
                return {"ok": True, **h}
            return {"ok": False, "error": "error", "message": f"unknown message type {t!r} for slave"}
        except Exception as exc:  # noqa: BLE001
            return error_response(exc)

    return handle


# transports --------------------------------------------------------------------


class LocalTransport:
    """Calls a handler in-process. ``encode=True`` round-trips every message through the wire codec."""

    def __init__(self, handler: Handler, encode: bool = False):
        self.handler = handler
        self.encode = encode
        self.down = False

    def request(self, msg: dict) -> dict:
        if self.down:
            raise UnavailableError("connection refused")
        if self.encode:
            msg = decode_message(encode_message(msg))
            return decode_message(encode_message(self.handler(msg)))
        return self.handler(msg)


class TcpTransport:
    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.address = (host, port)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    def request(self, msg: dict) -> dict:
        data = encode_message(msg)
        with self._lock:
            for attempt in range(2):
                try:
                    if self._sock is None:
                        self._sock = socket.create_connection(self.address, timeout=self.timeout)
                    self._sock.sendall(data)
                    return read_frame(self._sock)
                except (OSError, ConnectionError) as exc:
                    self.close_locked()
                    if attempt == 1:
                        raise UnavailableError(f"{self.address}: {exc}") from None
        raise UnavailableError(str(self.address))

    def close_locked(self):
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self):
        with self._lock:
            self.close_locked()


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        while True:
            try:
                msg = read_frame(sock)
            except (ConnectionError, OSError):
                return
            except ValueError as exc:
                sock.sendall(encode_message(error_response(exc)))
                return
            resp = self.server.dispatch(msg)
            try:
                sock.sendall(encode_message(resp))
            except OSError:
                return


class NodeServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, handler: Handler, host: str = "127.0.0.1", port: int = 0):
        self.dispatch = handler
        super().__init__((host, port), _FrameHandler)

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "NodeServer":
        threading.Thread(target=self.serve_forever, name=f"wire-{self.port}", daemon=True).start()
        return self

    def stop(self) -> None:
        """Stop the serve loop and release the listening socket."""
        self.shutdown()
        self.server_close()


# clients -------------------------------------------------------------------------


class MasterClient:
    def __init__(self, transport, endpoint: str = ""):
        self.transport = transport
        self.endpoint = endpoint

    def push_gradients(self, model_id: str, updates: Mapping[int, Mapping[str, Sequence[float]]]) -> dict:
        msg = {"type": PUSH_GRAD, "model_id": model_id, "updates": [[fid, g] for fid, g in updates.items()]}
        return raise_for(self.transport.request(msg))

    def pull_parameters(self, model_id: str, ids: Sequence[int]):
        resp = raise_for(self.transport.request({"type": PULL_PARAMS, "model_id": model_id, "ids": list(ids)}))
        return slots_from_wire(resp["slots"])

    def save_checkpoint(self, dest: str = "local", version: Optional[int] = None) -> dict:
        return raise_for(self.transport.request({"type": SAVE_CKPT, "dest": dest, "version": version}))["meta"]

    def load_checkpoint(self, version: int, reconcile: bool = True) -> dict:
        return raise_for(self.transport.request({"type": LOAD_CKPT, "version": version, "reconcile": reconcile}))

    def health(self) -> dict:
        return raise_for(self.transport.request({"type": HEALTH}))


class SlaveClient:
    def __init__(self, transport, endpoint: str = ""):
        self.transport = transport
        self.endpoint = endpoint

    def pull_serving(self, model_id: str, ids: Sequence[int]):
        resp = raise_for(self.transport.request({"type": PULL_SERVING, "model_id": model_id, "ids": list(ids)}))
        return slots_from_wire(resp["slots"])

    def load_version(self, version: int, hold: bool = False) -> dict:
        return raise_for(self.transport.request({"type": LOAD_VERSION, "version": version, "hold": hold}))

    def switch_version(self, version: int, hold: bool = False) -> dict:
        return raise_for(self.transport.request({"type": SWITCH_VERSION, "version": version, "hold": hold}))

    def health(self) -> dict:
        return raise_for(self.transport.request({"type": HEALTH}))


class AdminClient:
    def __init__(self, transport):
        self.transport = transport

    def trigger_checkpoint(self, model_id: str, dest: str = "local") -> dict:
        return raise_for(self.transport.request({"type": TRIGGER_CKPT, "model_id": model_id, "dest": dest}))

    def switch_version(self, model_id: str, version: int, hold: bool = False) -> dict:
        return raise_for(self.transport.request({"type": SWITCH_VERSION, "model_id": model_id, "version": version, "hold": hold}))

    def status(self) -> dict:
        return raise_for(self.transport.request({"type": STATUS}))

    def shutdown(self) -> dict:
        return raise_for(self.transport.request({"type": SHUTDOWN}))
