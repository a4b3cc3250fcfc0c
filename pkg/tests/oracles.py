"""Reference implementations written independently of the package code.

Each oracle recomputes a quantity from its textbook definition with a
different code path (numpy vectors, brute-force enumeration, plain folds)
so agreement is evidence rather than tautology.
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np


def ftrl_reference(alpha, beta, l1, l2, grads: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised FTRL-Proximal over many independent coordinates.

    ``grads`` has shape (steps, coords). Returns final (z, n, w), with w
    derived from (z, n) after each step exactly as the per-coordinate
    closed form prescribes.
    """
    steps, coords = grads.shape
    z = np.zeros(coords)
    n = np.zeros(coords)
    w = np.zeros(coords)
    for t in range(steps):
        g = grads[t]
        active = g != 0.0
        n_new = n + g * g
        sigma = (np.sqrt(n_new) - np.sqrt(n)) / alpha
        z = np.where(active, z + g - sigma * w, z)
        n = np.where(active, n_new, n)
        denom = (beta + np.sqrt(n)) / alpha + l2
        with np.errstate(divide="ignore", invalid="ignore"):
            # denom is 0 only for untouched coordinates, which np.where discards
            shrunk = -(z - np.sign(z) * l1) / denom
        w = np.where(active, np.where(np.abs(z) <= l1, 0.0, shrunk), w)
    return z, n, w


def auc_bruteforce(labels: Sequence[int], scores: Sequence[float]):
    """Fraction of correctly ordered (positive, negative) pairs, ties counting one half."""
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    if not pos or not neg:
        return None
    good = Fraction(0)
    for p in pos:
        for q in neg:
            if p > q:
                good += 1
            elif p == q:
                good += Fraction(1, 2)
    return float(good / (len(pos) * len(neg)))


def fm_logloss(label: int, w: Dict[int, float], v: Dict[int, np.ndarray], features: Sequence[Tuple[int, float]]) -> float:
    """FM logistic loss via the explicit O(n^2) pairwise sum."""
    s = sum(w[i] * x for i, x in features)
    for a in range(len(features)):
        for b in range(a + 1, len(features)):
            i, xi = features[a]
            j, xj = features[b]
            s += float(np.dot(v[i], v[j])) * xi * xj
    p = 1.0 / (1.0 + math.exp(-s))
    return -math.log(p) if label == 1 else -math.log(1.0 - p)


def fold_serving(records: Iterable, owned=lambda fid: True, base: Dict[int, dict] = None) -> Dict[int, dict]:
    """Apply records in order: UPSERT replaces the whole slot, DELETE removes it."""
    table = dict(base or {})
    for rec in records:
        if not owned(rec.feature_id):
            continue
        if int(rec.op) == 0:
            table[rec.feature_id] = {k: tuple(v) for k, v in rec.payload.items()}
        else:
            table.pop(rec.feature_id, None)
    return table


def serving_view(slot: dict, serve_names: Sequence[str]) -> dict:
    return {k: tuple(slot[k]) for k in serve_names if k in slot}


def percentile(values: List[float], q: float) -> float:
    return float(np.percentile(values, q))
