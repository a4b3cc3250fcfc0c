"""Progressive validation on the training stream and the downgrade decision logic."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .core_model import ModelSchema, Sample, Slot, log_loss, predict
from .errors import DowngradeAbortedError


@dataclass
class MetricSample:
    window_id: int
    version: int
    count: int
    logloss: float
    auc: Optional[float]
    timestamp: float = 0.0
    auc_defined: bool = True

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("a metric window holds at least one sample")
        if self.logloss < 0:
            raise ValueError("logloss cannot be negative")
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc {self.auc} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricSample":
        return cls(**d)


def auc_midrank(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """ROC AUC by the rank-sum statistic with average ranks for ties; None if one class is absent."""
    y = np.asarray(labels)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        return None
    ranks = rankdata(np.asarray(scores, dtype=float), method="average")
    return float((ranks[y == 1].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


class MetricAccumulator:
    """Open window of (label, prediction) pairs; additive across trainers."""

    def __init__(self):
        self.labels: List[int] = []
        self.predictions: List[float] = []
        self.loss_sum = 0.0

    @property
    def count(self) -> int:
        return len(self.labels)

    def add(self, label: int, prediction: float) -> float:
        loss = log_loss(label, prediction)
        self.labels.append(label)
        self.predictions.append(prediction)
        self.loss_sum += loss
        return loss

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        self.labels.extend(other.labels)
        self.predictions.extend(other.predictions)
        self.loss_sum += other.loss_sum
        return self

    def reset(self) -> None:
        self.labels = []
        self.predictions = []
        self.loss_sum = 0.0


def progressive_validate(
    schema: ModelSchema, slots: Mapping[int, Slot], sample: Sample, acc: MetricAccumulator
) -> Tuple[float, float]:
    """Score ``sample`` against pre-update parameters and book it into the open window.

    Returns ``(prediction, logloss contribution)``; the caller then trains on
    the same sample.
    """
    p = predict(schema, slots, sample)
    return p, acc.add(sample.label, p)


def close_window(acc: MetricAccumulator, window_id: int, version: int, timestamp: float = 0.0, window_size: int = 1) -> MetricSample:
    if acc.count < max(window_size, 1):
        raise ValueError(f"window holds {acc.count} samples, needs {window_size}")
    auc = auc_midrank(acc.labels, acc.predictions)
    sample = MetricSample(
        window_id=window_id,
        version=version,
        count=acc.count,
        logloss=acc.loss_sum / acc.count,
        auc=auc,
        timestamp=timestamp,
        auc_defined=auc is not None,
    )
    acc.reset()
    return sample


class Baseline(str, Enum):
    TRAILING_MEAN = "trailing-mean"
    FIXED = "fixed"


@dataclass
class TriggerConfig:
    window_size: int = 1000
    smooth_k: int = 5
    ratio: float = 1.2
    baseline: Baseline = Baseline.TRAILING_MEAN
    baseline_windows: int = 20
    fixed_baseline: Optional[float] = None

    def __post_init__(self):
        self.baseline = Baseline(self.baseline)
        if self.smooth_k < 1:
            raise ValueError("smooth_k must be >= 1")
        if not self.ratio > 1:
            raise ValueError("ratio must be > 1")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.baseline is Baseline.TRAILING_MEAN and self.baseline_windows < 1:
            raise ValueError("baseline_windows must be >= 1")
        if self.baseline is Baseline.FIXED and self.fixed_baseline is None:
            raise ValueError("a fixed baseline needs fixed_baseline")


@dataclass
class Decision:
    trigger: bool
    reason: str
    recent: Optional[float] = None
    baseline: Optional[float] = None


def should_downgrade(history: Sequence[MetricSample], cfg: TriggerConfig) -> Decision:
    """Trigger iff mean logloss of the last ``smooth_k`` windows exceeds ``ratio`` x baseline."""
    k = cfg.smooth_k
    if cfg.baseline is Baseline.TRAILING_MEAN:
        m = cfg.baseline_windows
        if len(history) < k + m:
            return Decision(False, "warming-up")
        base = history[-(k + m) : -k]
        b = math.fsum(s.logloss for s in base) / m
    else:
        if len(history) < k:
            return Decision(False, "warming-up")
        b = float(cfg.fixed_baseline)
    recent = math.fsum(s.logloss for s in history[-k:]) / k
    if recent > cfg.ratio * b:
        return Decision(True, f"recent logloss {recent:.4f} > {cfg.ratio} x baseline {b:.4f}", recent, b)
    return Decision(False, "within threshold", recent, b)


class StrategyKind(str, Enum):
    LATEST = "LATEST"
    BEST_METRIC = "BEST_METRIC"


@dataclass
class VersionStrategy:
    kind: StrategyKind = StrategyKind.LATEST
    metric: str = "logloss"

    def __post_init__(self):
        self.kind = StrategyKind(self.kind)
        if self.metric not in ("logloss", "auc"):
            raise ValueError(f"unknown metric {self.metric!r}")


def select_version(
    candidates: Iterable[Tuple[int, Sequence[MetricSample]]],
    strategy: VersionStrategy,
    degraded_version: Optional[int] = None,
) -> int:
    """Pick the version to roll back to; only versions below ``degraded_version`` qualify."""
    pool = [(v, list(h)) for v, h in candidates if degraded_version is None or v < degraded_version]
    if not pool:
        raise DowngradeAbortedError("no candidate version to downgrade to")
    if strategy.kind is StrategyKind.LATEST:
        return max(v for v, _ in pool)
    scored = []
    for v, hist in pool:
        if strategy.metric == "logloss":
            vals = [s.logloss for s in hist]
            if vals:
                scored.append((-(math.fsum(vals) / len(vals)), v))
        else:
            vals = [s.auc for s in hist if s.auc is not None]
            if vals:
                scored.append((math.fsum(vals) / len(vals), v))
    if not scored:
        raise DowngradeAbortedError("no candidate version has metric history")
    # maximise the score, ties broken by the higher version
    return max(scored)[1]


def write_metrics_csv(path, samples: Iterable[MetricSample]) -> None:
    fields = ["window_id", "version", "count", "logloss", "auc", "auc_defined", "timestamp"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for s in samples:
            w.writerow({k: getattr(s, k) for k in fields})
