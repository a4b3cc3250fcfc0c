"""Mini-batch trainer and the windowed metric publisher that rides on it."""

from __future__ import annotations

import logging
import threading
from typing import Callable, Dict, List, Mapping, MutableMapping, Optional, Sequence, Set

from ..core_model import ModelSchema, Sample, add_gradients, gradient_names, gradient_of_sample, split_gradients
from ..errors import UnavailableError
from ..monitor import MetricAccumulator, MetricSample, TriggerConfig, close_window, progressive_validate

logger = logging.getLogger(__name__)


class MetricMonitor:
    """Shared open window fed by every trainer; closes exactly every ``window_size`` samples."""

    def __init__(self, cfg: TriggerConfig, version_fn: Callable[[], int], clock, publish: Callable[[MetricSample], None]):
        self.cfg = cfg
        self.version_fn = version_fn
        self.clock = clock
        self.publish = publish
        self.open = MetricAccumulator()
        self.history: List[MetricSample] = []
        self._next_window = 1
        self._lock = threading.Lock()

    def absorb(self, acc: MetricAccumulator) -> List[MetricSample]:
        closed = []
        size = self.cfg.window_size
        with self._lock:
            for label, p in zip(acc.labels, acc.predictions):
                self.open.add(label, p)
                if self.open.count >= size:
                    ms = close_window(self.open, self._next_window, self.version_fn(), self.clock.now(), size)
                    self._next_window += 1
                    self.history.append(ms)
                    closed.append(ms)
        for ms in closed:
            self.publish(ms)
        return closed


class Trainer:
    """Pull, validate, compute gradients and push, one mini-batch at a time.

    Every sample is scored against the parameters pulled for its batch before
    the batch's summed gradients are pushed, so validation always precedes
    the update it feeds.
    """

    def __init__(
        self,
        model_id: str,
        schema: ModelSchema,
        masters: Mapping[int, object],
        num_masters: int,
        monitor: Optional[MetricMonitor] = None,
    ):
        self.model_id = model_id
        self.schema = schema
        self.masters = masters
        self.num_masters = num_masters
        self.monitor = monitor
        self.names = gradient_names(schema)
        self.samples_seen = 0
        self.seen_ids: Set[int] = set()
        self.unsent: Dict[int, Dict[int, dict]] = {}

    def pull(self, ids: Sequence[int]) -> Dict[int, dict]:
        n = self.num_masters
        by_shard: Dict[int, List[int]] = {}
        for fid in ids:
            by_shard.setdefault(fid % n, []).append(fid)
        params: Dict[int, dict] = {}
        for k, shard_ids in by_shard.items():
            params.update(self.masters[k].pull_parameters(self.model_id, shard_ids))
        return params

    def flush_unsent(self) -> None:
        """Retry pushes that failed because their shard was down."""
        for k in sorted(self.unsent):
            self.masters[k].push_gradients(self.model_id, self.unsent[k])
            del self.unsent[k]

    def train_batch(self, batch: Sequence[Sample]) -> MetricAccumulator:
        """Train on ``batch``. Raises UnavailableError, without consuming the batch,
        while an earlier push still cannot be delivered."""
        if self.unsent:
            self.flush_unsent()
        ids = list(dict.fromkeys(fid for s in batch for fid, _ in s.features))
        params = self.pull(ids)
        schema = self.schema
        names = self.names
        acc = MetricAccumulator()
        flat: Dict[int, List[float]] = {}
        for s in batch:
            p, _ = progressive_validate(schema, params, s, acc)
            add_gradients(flat, gradient_of_sample(schema, params, s, p), names)
        n = self.num_masters
        pushes: Dict[int, Dict[int, dict]] = {}
        for fid, g in flat.items():
            pushes.setdefault(fid % n, {})[fid] = split_gradients(g, schema, names)
        self.seen_ids.update(ids)
        self.samples_seen += len(batch)
        for k in sorted(pushes):
            try:
                self.masters[k].push_gradients(self.model_id, pushes[k])
            except UnavailableError:
                # the batch is consumed; its share for a down shard is retried before the next batch
                self.unsent[k] = pushes[k]
        if self.monitor is not None:
            self.monitor.absorb(acc)
        return acc
