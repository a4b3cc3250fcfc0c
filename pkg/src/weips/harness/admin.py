"""Admin endpoint of a running cluster: checkpoint, version switch, status, shutdown."""

from __future__ import annotations

import threading

from ..wire import STATUS, SHUTDOWN, SWITCH_VERSION, TRIGGER_CKPT, NodeServer, error_response


def admin_handler(topo, shutdown: threading.Event):
    sched = topo.scheduler

    def handle(msg: dict) -> dict:
        t = msg.get("type")
        try:
            if t in (TRIGGER_CKPT, SWITCH_VERSION) and msg.get("model_id") != topo.model_id:
                return {"ok": False, "error": "routing", "message": f"unknown model {msg.get('model_id')!r}"}
            if t == TRIGGER_CKPT:
                rnd = sched.submit(sched.trigger_checkpoints, msg.get("dest", "local")).result()
                return {"ok": True, "version": rnd.version, "published": rnd.published, "errors": {str(k): v for k, v in rnd.errors.items()}}
            if t == SWITCH_VERSION:
                rep = sched.submit(sched.switch_version, int(msg["version"]), bool(msg.get("hold", False))).result()
                return {"ok": True, "version": rep.version, "availability": [list(a) for a in rep.availability]}
            if t == STATUS:
                return {
                    "ok": True,
                    "model_id": topo.model_id,
                    "shard_map": sched.shard_map.to_dict(),
                    "versions": sched.versions(),
                    "counters": topo.counters(),
                }
            if t == SHUTDOWN:
                shutdown.set()
                return {"ok": True}
            return {"ok": False, "error": "error", "message": f"unknown admin message {t!r}"}
        except Exception as exc:  # noqa: BLE001
            return error_response(exc)

    return handle


def serve_admin(topo, port: int = 0, host: str = "127.0.0.1"):
    """Start the admin server; returns ``(server, shutdown_event)``."""
    shutdown = threading.Event()
    server = NodeServer(admin_handler(topo, shutdown), host, port).start()
    return server, shutdown
