"""Entry point for one master or slave replica running as its own process.

Prints ``READY <port>`` on stdout once the wire server listens, then serves
until SHUTDOWN or termination. Pipeline and scatter loops run in threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading

from ..checkpoint import CheckpointStore
from ..clock import WallClock
from ..master import MasterShard
from ..plog import FileLog
from ..slave import SlaveReplica
from ..wire import SHUTDOWN, NodeServer, master_handler, slave_handler
from .config import config_from_dict


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="weips-node")
    ap.add_argument("--config", required=True)
    ap.add_argument("--role", choices=("master", "slave"), required=True)
    ap.add_argument("--shard", type=int, required=True)
    ap.add_argument("--replica", type=int, default=0)
    ap.add_argument("--version", type=int, default=None)
    ap.add_argument("--port", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)

    with open(args.config) as fh:
        cfg = config_from_dict(json.load(fh))
    clock = WallClock()
    c = cfg.cluster
    log = FileLog(cfg.log.dir, cfg.model_id, c.num_partitions, compress=cfg.log.compress, fsync=cfg.log.fsync)
    log.clock = clock
    stores = {
        "local": CheckpointStore(cfg.checkpoint.dir, "local"),
        "remote-sim": CheckpointStore(cfg.checkpoint.remote_dir, "remote-sim"),
    }
    stop = threading.Event()
    schema = cfg.model_schema()
    if args.role == "master":
        node = MasterShard(cfg.model_id, args.shard, c.num_masters, schema, log, cfg.sync, clock, stores, c.collector_bound)
        handler = master_handler(node)
        step = node.pipeline_step
    else:
        node = SlaveReplica(cfg.model_id, args.shard, c.num_slaves, schema, log, list(stores.values()), args.replica)
        if args.version is not None:
            node.load_version(args.version)
        handler = slave_handler(node)
        step = node.scatter_step

    def dispatch(msg: dict) -> dict:
        if msg.get("type") == SHUTDOWN:
            stop.set()
            return {"ok": True}
        return handler(msg)

    def loop():
        while not stop.is_set():
            try:
                worked = step()
            except Exception:  # noqa: BLE001
                logging.exception("node step failed")
                worked = 0
            if not worked:
                stop.wait(0.001)

    server = NodeServer(dispatch, port=args.port).start()
    threading.Thread(target=loop, daemon=True).start()
    print(f"READY {server.port}", flush=True)
    stop.wait()
    server.shutdown()
    return 0


if __name__ == "__main__":
    sys.exit(main())
