"""Render run artifacts into CSV files and a text summary."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping

from ..monitor import MetricSample, write_metrics_csv


def save_artifacts(artifacts: Mapping, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(artifacts, indent=2, sort_keys=True, default=str))
    return path


def load_artifacts(path) -> dict:
    return json.loads(Path(path).read_text())


def write_report(artifacts: Mapping, out_dir) -> Path:
    """Write metrics.csv, freshness.csv, timeline.csv and summary.txt; returns the summary path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = [MetricSample.from_dict(m) for m in artifacts.get("metrics", [])]
    write_metrics_csv(out / "metrics.csv", metrics)

    fresh = artifacts.get("freshness") or {}
    with open(out / "freshness.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "probe", "latency_s"])
        for mode, res in sorted(fresh.items()):
            for i, lat in enumerate(res.get("latencies", [])):
                w.writerow([mode, i, f"{lat:.6f}"])

    with open(out / "timeline.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kind", "detail"])
        for e in artifacts.get("events", []):
            detail = {k: v for k, v in e.items() if k not in ("t", "kind")}
            w.writerow([f"{e['t']:.3f}", e["kind"], json.dumps(detail, sort_keys=True, default=str)])

    c = artifacts.get("counters", {})
    lines = [f"model: {artifacts.get('model_id')}", ""]
    lines.append(f"samples trained: {c.get('samples')}")
    if c.get("dedup_ratio") is not None:
        lines.append(
            f"dedup ratio: {c['dedup_ratio']:.3f} ({c['dirty_drained']} dirty entries drained, "
            f"{c['records_emitted']} records emitted, gather mode {c.get('gather_mode')})"
        )
    if "bytes_appended" in c:
        lines.append(f"log bytes appended: {c['bytes_appended']} ({c.get('gather_mode', 'n/a')} gather)")
    bw = artifacts.get("bandwidth_by_mode") or {}
    for mode, b in sorted(bw.items()):
        lines.append(f"  {mode}: {b['bytes']} bytes, {b['records']} records, dedup ratio {b['dedup_ratio']:.3f}")
    if metrics:
        tail = metrics[-1]
        lines.append(f"metric windows: {len(metrics)} (last logloss {tail.logloss:.4f}, auc {tail.auc})")
    for mode, res in sorted(fresh.items()):
        lines.append(f"freshness {mode}: p50 {res['p50']:.4f}s p99 {res['p99']:.4f}s over {res['probes']} probes, {res['lost']} lost")
    versions = artifacts.get("versions", [])
    lines.append(f"checkpoint versions: {[v['version'] for v in versions]}")
    faults = artifacts.get("faults", [])
    lines.append(f"injected faults: {len(faults)}")
    lines.append("")
    lines.append("timeline:")
    for e in artifacts.get("events", []):
        detail = " ".join(f"{k}={v}" for k, v in sorted(e.items()) if k not in ("t", "kind"))
        lines.append(f"  {e['t']:10.3f}  {e['kind']:<22} {detail}")
    summary = out / "summary.txt"
    summary.write_text("\n".join(lines) + "\n")
    return summary
