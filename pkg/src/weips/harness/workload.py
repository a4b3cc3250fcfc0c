"""Deterministic synthetic click stream: zipf feature draws labelled by a hidden linear model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from ..core_model import Sample

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
CHUNK = 10_000


def feature_id(rank: int) -> int:
    """Spread zipf ranks over the 64-bit id space (odd multiplier, so a bijection)."""
    return ((rank + 1) * GOLDEN) & MASK64


@dataclass
class Corruption:
    start_sample: int
    mode: str = "label-flip"

    def __post_init__(self):
        if self.mode != "label-flip":
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        if self.start_sample < 0:
            raise ValueError("corruption start must be >= 0")


@dataclass
class WorkloadSpec:
    num_features: int = 100_000
    zipf_s: float = 1.1
    features_per_sample: int = 4
    seed: int = 0
    samples_per_second: float = 10_000.0
    num_samples: int = 100_000
    weight_scale: float = 1.0
    corruption: Optional[Corruption] = None

    def __post_init__(self):
        if isinstance(self.corruption, dict):
            self.corruption = Corruption(**self.corruption)
        if self.num_features < 1 or self.features_per_sample < 1:
            raise ValueError("num_features and features_per_sample must be >= 1")
        if self.zipf_s < 0:
            raise ValueError("zipf_s must be >= 0")
        if not self.samples_per_second > 0:
            raise ValueError("samples_per_second must be positive")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")


class Workload:
    """Materialized generator state: the zipf CDF plus the hidden weights keyed by rank."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        ranks = np.arange(1, spec.num_features + 1, dtype=np.float64)
        weights = ranks ** (-spec.zipf_s)
        self.cdf = np.cumsum(weights) / weights.sum()
        self.cdf[-1] = 1.0
        rng = np.random.default_rng([spec.seed, 0xC0FFEE])
        self.true_weights = rng.normal(0.0, spec.weight_scale, spec.num_features)
        self.ids = [feature_id(r) for r in range(spec.num_features)]

    def rank_of(self, fid: int) -> int:
        return ((fid * pow(GOLDEN, -1, 1 << 64)) & MASK64) - 1

    def chunk(self, c: int) -> List[Sample]:
        """Samples ``c*CHUNK .. (c+1)*CHUNK - 1``; each chunk has its own seeded generator."""
        spec = self.spec
        rng = np.random.default_rng([spec.seed, c])
        u = rng.random((CHUNK, spec.features_per_sample))
        ranks = np.searchsorted(self.cdf, u, side="right")
        np.minimum(ranks, spec.num_features - 1, out=ranks)
        coin = rng.random(CHUNK)
        ids = self.ids
        tw = self.true_weights
        flip_from = spec.corruption.start_sample if spec.corruption is not None else None
        base = c * CHUNK
        out = []
        for i, row in enumerate(ranks.tolist()):
            uniq = list(dict.fromkeys(row))
            z = float(tw[uniq].sum())
            p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
            label = 1 if coin[i] < p else 0
            if flip_from is not None and base + i >= flip_from:
                label = 1 - label
            out.append(Sample(label, tuple((ids[r], 1.0) for r in uniq)))
        return out

    def stream(self, start: int = 0, stop: Optional[int] = None) -> Iterator[Sample]:
        stop = self.spec.num_samples if stop is None else stop
        c = start // CHUNK
        i = start
        while i < stop:
            samples = self.chunk(c)
            lo = i - c * CHUNK
            hi = min(CHUNK, stop - c * CHUNK)
            yield from samples[lo:hi]
            i = c * CHUNK + hi
            c += 1

    def batches(self, batch_size: int, start: int = 0, stop: Optional[int] = None) -> Iterator[List[Sample]]:
        batch: List[Sample] = []
        for s in self.stream(start, stop):
            batch.append(s)
            if len(batch) == batch_size:
                yield batch
                batch = []
        if batch:
            yield batch


def generate_samples(spec: WorkloadSpec, start: int = 0, stop: Optional[int] = None) -> Iterator[Sample]:
    """Reproducible sample stream for ``spec``: same seed, same samples."""
    return Workload(spec).stream(start, stop)
