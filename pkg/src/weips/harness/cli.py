"""``weips`` command line."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
import time
from pathlib import Path
from typing import List, Optional

from ..errors import WeipsError
from ..master import GatherConfig, GatherMode
from ..wire import AdminClient, TcpTransport
from .config import Config, load_config
from .faults import load_plan
from .freshness import measure_freshness
from .report import load_artifacts, save_artifacts, write_report
from .workload import Workload

DEFAULT_ADMIN = "127.0.0.1:7070"


def _config(path: Optional[str]) -> Config:
    return load_config(path) if path else Config()


def _finish(topo, out_dir: Optional[str], extra: Optional[dict] = None) -> int:
    topo.drain()
    mismatches = topo.consistency_mismatches()
    bad = {k: v for k, v in mismatches.items() if v}
    art = topo.artifacts((extra or {}).get("freshness"))
    art.update({k: v for k, v in (extra or {}).items() if k != "freshness"})
    art["consistency"] = mismatches
    if out_dir:
        save_artifacts(art, Path(out_dir) / "run.json")
        summary = write_report(art, out_dir)
        print(summary.read_text())
    c = topo.counters()
    print(f"trained {c['samples']} samples; replicas consistent with masters: {'yes' if not bad else 'NO ' + str(bad)}")
    return 0 if not bad else 1


def cmd_run(args) -> int:
    from .cluster import run_cluster
    from .admin import serve_admin

    cfg = _config(args.config)
    if args.samples is not None:
        cfg.workload.num_samples = args.samples
    topo = run_cluster(cfg, args.workdir)
    admin = None
    try:
        if args.admin_port is not None:
            admin, shutdown = serve_admin(topo, args.admin_port)
            print(f"admin endpoint 127.0.0.1:{admin.port}", flush=True)
        topo.run_workload(pace=args.pace)
        rc = _finish(topo, args.out or cfg.report_dir)
        if admin is not None and args.linger:
            print("serving admin requests until SHUTDOWN", flush=True)
            shutdown.wait()
        return rc
    finally:
        if admin is not None:
            admin.stop()
        topo.stop()


def cmd_inject(args) -> int:
    from .cluster import run_cluster

    plan = load_plan(args.plan)
    cfg = _config(args.config or plan.config)
    topo = run_cluster(cfg, args.workdir)
    try:
        plan.validate_against(topo)
        topo.run_workload(faults=plan.actions, pace=args.pace)
        if topo.threaded:
            # give the scheduler time to notice and repair the injected failures
            time.sleep(cfg.scheduler.probe_interval * (cfg.scheduler.miss_threshold + 2))
        else:
            for _ in range(cfg.scheduler.miss_threshold + 2):
                topo.clock.advance(cfg.scheduler.probe_interval)
                topo.scheduler.tick()
        for f in topo.faults:
            print(f"fault at sample {f.at_sample}: {f.action} {f.args}")
        return _finish(topo, args.out or cfg.report_dir)
    finally:
        topo.stop()


def cmd_bench_freshness(args) -> int:
    from .cluster import run_cluster

    base = _config(args.config)
    results = {}
    bandwidth = {}
    for mode in args.modes:
        cfg = _config(args.config)
        cfg.cluster.clock = "wall"
        cfg.sync = GatherConfig(GatherMode(mode), args.threshold, args.period)
        topo = run_cluster(cfg, None)
        try:
            halt = threading.Event()
            wl = Workload(cfg.workload)
            th = threading.Thread(target=topo.run_workload, args=(wl, 0, cfg.workload.num_samples), kwargs={"pace": True, "halt": halt}, daemon=True)
            th.start()
            res = measure_freshness(topo, args.probes, args.rate, timeout=max(30.0, 3 * args.period))
            halt.set()
            th.join(60)
            results[mode] = {**res.summary(), "latencies": res.latencies}
            c = topo.counters()
            bandwidth[mode] = {"bytes": c["bytes_appended"], "records": c["records_emitted"], "dedup_ratio": c["dedup_ratio"] or 1.0}
            print(f"{mode:<10} p50 {res.p50 * 1000:9.2f} ms   p99 {res.p99 * 1000:9.2f} ms   probes {len(res.latencies)}  lost {res.lost}")
        finally:
            topo.stop()
    if args.out:
        art = {"model_id": base.model_id, "freshness": results, "bandwidth_by_mode": bandwidth, "counters": {}, "metrics": [], "events": []}
        save_artifacts(art, Path(args.out) / "run.json")
        write_report(art, args.out)
    return 0


def cmd_admin(args) -> int:
    host, _, port = args.endpoint.rpartition(":")
    client = AdminClient(TcpTransport(host or "127.0.0.1", int(port)))
    if args.admin_cmd == "switch-version":
        resp = client.switch_version(args.model, args.version, hold=args.hold)
    elif args.admin_cmd == "checkpoint":
        resp = client.trigger_checkpoint(args.model, args.dest)
    elif args.admin_cmd == "status":
        resp = client.status()
    else:
        resp = client.shutdown()
    print(json.dumps(resp, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    src = Path(args.run) if args.run else Path(args.out) / "run.json"
    if not src.exists():
        print(f"no run artifacts at {src}; run 'weips run --config <path> --out <dir>' first", file=sys.stderr)
        return 2
    summary = write_report(load_artifacts(src), args.out)
    print(summary.read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="weips", description="Fused online training and serving parameter server")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="launch a cluster and train on the configured workload")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="report directory (defaults to report_dir from the config)")
    run.add_argument("--workdir", help="directory for logs and checkpoints (temporary if omitted)")
    run.add_argument("--samples", type=int, help="override workload.num_samples")
    run.add_argument("--pace", action="store_true", help="feed samples at workload.samples_per_second")
    run.add_argument("--admin-port", type=int, help="serve admin requests on this port")
    run.add_argument("--linger", action="store_true", help="keep serving admin requests after the workload ends")
    run.set_defaults(fn=cmd_run)

    inj = sub.add_parser("inject", help="run the workload while applying a fault plan")
    inj.add_argument("--plan", required=True)
    inj.add_argument("--config")
    inj.add_argument("--out")
    inj.add_argument("--workdir")
    inj.add_argument("--pace", action="store_true")
    inj.set_defaults(fn=cmd_inject)

    fr = sub.add_parser("bench-freshness", help="measure update-to-visible latency per gather mode")
    fr.add_argument("--config")
    fr.add_argument("--modes", nargs="+", default=["REALTIME", "THRESHOLD", "PERIOD"], choices=[m.value for m in GatherMode])
    fr.add_argument("--probes", type=int, default=500)
    fr.add_argument("--rate", type=float, default=100.0, help="probes per second")
    fr.add_argument("--threshold", type=int, default=1000)
    fr.add_argument("--period", type=float, default=10.0)
    fr.add_argument("--out")
    fr.set_defaults(fn=cmd_bench_freshness)

    adm = sub.add_parser("admin", help="talk to a running cluster's admin endpoint")
    adm.add_argument("--endpoint", default=DEFAULT_ADMIN)
    asub = adm.add_subparsers(dest="admin_cmd", required=True)
    sv = asub.add_parser("switch-version")
    sv.add_argument("model")
    sv.add_argument("version", type=int)
    sv.add_argument("--hold", action="store_true", help="pin the serving table at the snapshot")
    ck = asub.add_parser("checkpoint")
    ck.add_argument("model")
    ck.add_argument("--dest", default="local", choices=["local", "remote-sim"])
    asub.add_parser("status")
    asub.add_parser("shutdown")
    adm.set_defaults(fn=cmd_admin)

    rep = sub.add_parser("report", help="render CSV files and a summary from run artifacts")
    rep.add_argument("--out", required=True)
    rep.add_argument("--run", help="artifact file (defaults to <out>/run.json)")
    rep.set_defaults(fn=cmd_report)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except WeipsError as exc:
        print(f"error ({exc.kind}): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
