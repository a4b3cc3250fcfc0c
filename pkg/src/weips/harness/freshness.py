"""Update-to-visible latency measured with sentinel features."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..core_model import SchemaName
from .workload import feature_id

SENTINEL_BASE = 1 << 40  # ranks far above any workload vocabulary


@dataclass
class FreshnessResult:
    mode: str
    latencies: List[float] = field(default_factory=list)
    lost: int = 0

    @property
    def p50(self) -> float:
        return float(np.percentile(self.latencies, 50)) if self.latencies else float("nan")

    @property
    def p99(self) -> float:
        return float(np.percentile(self.latencies, 99)) if self.latencies else float("nan")

    def summary(self) -> dict:
        return {"mode": self.mode, "probes": len(self.latencies), "lost": self.lost, "p50": self.p50, "p99": self.p99}


def _sentinel_gradient(schema) -> dict:
    # large enough to move w off zero through the L1 dead zone in one step
    g = {"w": (5.0,)}
    if schema.name is SchemaName.FM_SGD:
        g["v"] = (0.0,) * schema.hyperparams.fm_k
    return g


def measure_freshness(topo, probes: int = 500, rate: float = 100.0, timeout: float = 30.0, poll: float = 0.001, salt: int = 0) -> FreshnessResult:
    """Write one sentinel update per probe and poll its serving shard until it shows.

    A probe's latency runs from just before its push to the first pull that
    returns a non-zero ``w``. Requires a threaded (wall-clock) topology.
    """
    if not topo.threaded:
        raise ValueError("freshness needs a threaded topology on the wall clock")
    model_id = topo.model_id
    grad = _sentinel_gradient(topo.schema)
    outstanding: Dict[int, float] = {}
    result = FreshnessResult(topo.cfg.sync.mode.value)
    lock = threading.Lock()
    done = threading.Event()

    def poller():
        client = topo.serving
        while not done.is_set() or outstanding:
            with lock:
                ids = list(outstanding)
            began = time.monotonic()
            if ids:
                seen = client.pull(ids)
                now = time.monotonic()
                with lock:
                    for fid in ids:
                        if seen[fid]["w"][0] != 0.0:
                            result.latencies.append(now - outstanding.pop(fid))
                    if done.is_set():
                        for fid, t0 in list(outstanding.items()):
                            if now - t0 > timeout:
                                outstanding.pop(fid)
                                result.lost += 1
            # back off in proportion to the pull cost so polling never starves the pipeline threads
            time.sleep(max(poll, 2.0 * (time.monotonic() - began)))

    th = threading.Thread(target=poller, name="freshness-poller", daemon=True)
    th.start()
    start = time.monotonic()
    base = SENTINEL_BASE + salt * (1 << 24)
    for j in range(probes):
        due = start + j / rate
        delay = due - time.monotonic()
        if delay > 0:
            time.sleep(delay)
        fid = feature_id(base + j)
        shard = fid % topo.num_masters
        with lock:
            outstanding[fid] = time.monotonic()
        topo.master_clients[shard].push_gradients(model_id, {fid: grad})
    done.set()
    th.join(timeout + 5)
    return result
