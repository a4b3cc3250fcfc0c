"""Model schemas and per-coordinate optimizers, plus the training -> serving transform.

A parameter slot is a plain ``dict`` mapping matrix name to a tuple of floats.
Tuples keep slots immutable, so tables can be snapshotted with a shallow copy
and readers never observe a half-written slot.
"""

from __future__ import annotations

import math
from functools import cached_property
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

from .errors import InvalidSlotError, NumericOverflowError

Slot = Dict[str, Tuple[float, ...]]
Gradients = Dict[str, Tuple[float, ...]]

TRAIN_ONLY = "train-only"
SERVE_ONLY = "serve-only"
SHARED = "shared"

TRAINING = "training"
SERVING = "serving"


class SchemaName(str, Enum):
    LR_FTRL = "LR_FTRL"
    FM_SGD = "FM_SGD"


class MatrixSpec(NamedTuple):
    name: str
    role: str
    width: int


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.1
    beta: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    sgd_eta: float = 0.05
    fm_k: int = 4
    # FM latent vectors start from a small deterministic draw keyed by feature id;
    # an all-zero start is a fixed point of the pairwise gradient.
    fm_init_std: float = 0.01
    init_seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not self.lambda1 >= 0:
            raise ValueError(f"lambda1 must be >= 0, got {self.lambda1}")
        if not self.lambda2 >= 0:
            raise ValueError(f"lambda2 must be >= 0, got {self.lambda2}")
        if not self.sgd_eta > 0:
            raise ValueError(f"sgd_eta must be > 0, got {self.sgd_eta}")
        if not isinstance(self.fm_k, int) or isinstance(self.fm_k, bool) or self.fm_k < 1:
            raise ValueError(f"fm_k must be a positive integer, got {self.fm_k!r}")
        if not self.fm_init_std >= 0:
            raise ValueError(f"fm_init_std must be >= 0, got {self.fm_init_std}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "sgd_eta": self.sgd_eta,
            "fm_k": self.fm_k,
            "fm_init_std": self.fm_init_std,
            "init_seed": self.init_seed,
        }


@dataclass(frozen=True)
class ModelSchema:
    name: SchemaName
    matrices: Tuple[MatrixSpec, ...]
    hyperparams: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        object.__setattr__(self, "name", SchemaName(self.name))
        names = [m.name for m in self.matrices]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate matrix names in {names}")
        for m in self.matrices:
            if m.role not in (TRAIN_ONLY, SERVE_ONLY, SHARED):
                raise ValueError(f"unknown matrix role {m.role!r}")
            if m.width < 1:
                raise ValueError(f"matrix {m.name} has non-positive width")
        if self.name is SchemaName.LR_FTRL:
            expected = {("z", TRAIN_ONLY, 1), ("n", TRAIN_ONLY, 1), ("w", SERVE_ONLY, 1)}
            if set(self.matrices) != expected or len(self.matrices) != 3:
                raise ValueError("LR_FTRL declares exactly z, n (train-only) and w (serve-only), width 1")
        elif self.name is SchemaName.FM_SGD:
            k = self.hyperparams.fm_k
            expected = {("w", SHARED, 1), ("v", SHARED, k)}
            if set(self.matrices) != expected or len(self.matrices) != 2:
                raise ValueError(f"FM_SGD declares exactly w (width 1) and v (width {k}), both shared")

    @classmethod
    def lr_ftrl(cls, hp: Optional[HyperParams] = None) -> "ModelSchema":
        return cls(
            SchemaName.LR_FTRL,
            (MatrixSpec("z", TRAIN_ONLY, 1), MatrixSpec("n", TRAIN_ONLY, 1), MatrixSpec("w", SERVE_ONLY, 1)),
            hp or HyperParams(),
        )

    @classmethod
    def fm_sgd(cls, hp: Optional[HyperParams] = None) -> "ModelSchema":
        hp = hp or HyperParams()
        return cls(SchemaName.FM_SGD, (MatrixSpec("w", SHARED, 1), MatrixSpec("v", SHARED, hp.fm_k)), hp)

    @classmethod
    def create(cls, name, hp: Optional[HyperParams] = None) -> "ModelSchema":
        name = SchemaName(name)
        if name is SchemaName.LR_FTRL:
            return cls.lr_ftrl(hp)
        return cls.fm_sgd(hp)

    @cached_property
    def widths(self) -> Dict[str, int]:
        return {m.name: m.width for m in self.matrices}

    @cached_property
    def serving_names(self) -> Tuple[str, ...]:
        return tuple(m.name for m in self.matrices if m.role != TRAIN_ONLY)

    @cached_property
    def training_names(self) -> Tuple[str, ...]:
        return tuple(m.name for m in self.matrices)

    def names_for(self, view: str) -> Tuple[str, ...]:
        return self.serving_names if view == SERVING else self.training_names

    def to_dict(self) -> dict:
        return {
            "name": self.name.value,
            "matrices": [list(m) for m in self.matrices],
            "hyperparams": self.hyperparams.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSchema":
        return cls(
            SchemaName(d["name"]),
            tuple(MatrixSpec(str(n), str(r), int(w)) for n, r, w in d["matrices"]),
            HyperParams(**d["hyperparams"]),
        )


@dataclass(frozen=True)
class Sample:
    label: int
    features: Tuple[Tuple[int, float], ...]

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        ids = [f for f, _ in self.features]
        if len(set(ids)) != len(ids):
            raise ValueError("feature ids must be unique within a sample")
        for fid, x in self.features:
            if not 0 <= fid < 2**64:
                raise ValueError(f"feature id {fid} outside unsigned 64-bit range")
            if not math.isfinite(x):
                raise ValueError(f"non-finite feature value for id {fid}")


def zero_slot(schema: ModelSchema, view: str = TRAINING) -> Slot:
    widths = schema.widths
    return {name: (0.0,) * widths[name] for name in schema.names_for(view)}


def initial_slot(schema: ModelSchema, feature_id: int) -> Slot:
    """Training slot a feature starts from the first time the master updates it."""
    slot = zero_slot(schema, TRAINING)
    if schema.name is SchemaName.FM_SGD:
        hp = schema.hyperparams
        rng = random.Random((feature_id << 16) ^ hp.init_seed)
        slot["v"] = tuple(rng.gauss(0.0, hp.fm_init_std) for _ in range(hp.fm_k))
    return slot


def validate_slot(schema: ModelSchema, slot: Mapping[str, Iterable[float]], view: Optional[str] = None) -> None:
    widths = schema.widths
    for name, values in slot.items():
        if name not in widths:
            raise InvalidSlotError(f"matrix {name!r} not in schema {schema.name.value}")
        if len(values) != widths[name]:
            raise InvalidSlotError(f"matrix {name!r} has length {len(values)}, expected {widths[name]}")
        for x in values:
            if not math.isfinite(x):
                raise InvalidSlotError(f"non-finite value in matrix {name!r}")
    if view is not None:
        expected = set(schema.names_for(view))
        if set(slot) != expected:
            raise InvalidSlotError(f"{view} slot must hold exactly {sorted(expected)}, got {sorted(slot)}")


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def score(schema: ModelSchema, slots: Mapping[int, Slot], sample: Sample) -> float:
    if schema.name is SchemaName.LR_FTRL:
        s = 0.0
        for fid, x in sample.features:
            slot = slots.get(fid)
            if slot is not None:
                w = slot.get("w")
                if w is None or len(w) != 1:
                    raise InvalidSlotError(f"LR slot for {fid} lacks a width-1 'w'")
                s += w[0] * x
        return s

    k = schema.hyperparams.fm_k
    linear = 0.0
    sums = [0.0] * k
    sq = [0.0] * k
    for fid, x in sample.features:
        slot = slots.get(fid)
        if slot is None:
            continue
        w = slot.get("w")
        v = slot.get("v")
        if w is None or v is None or len(w) != 1 or len(v) != k:
            raise InvalidSlotError(f"FM slot for {fid} does not match schema (k={k})")
        linear += w[0] * x
        for f in range(k):
            vx = v[f] * x
            sums[f] += vx
            sq[f] += vx * vx
    pair = 0.0
    for f in range(k):
        pair += sums[f] * sums[f] - sq[f]
    return linear + 0.5 * pair


def predict(schema: ModelSchema, slots: Mapping[int, Slot], sample: Sample, view: str = TRAINING) -> float:
    """Probability of a positive label. Missing feature ids act as zero slots.

    LR reads only ``w`` so the result is the same for the training and serving
    views of one model state.
    """
    if view not in (TRAINING, SERVING):
        raise ValueError(f"unknown view {view!r}")
    return sigmoid(score(schema, slots, sample))


def ftrl_update(hp: HyperParams, slot: Mapping[str, Tuple[float, ...]], gradient: float) -> Slot:
    """One per-coordinate FTRL-Proximal step; ``w`` is re-derived eagerly."""
    try:
        z = slot["z"][0]
        n = slot["n"][0]
        w = slot["w"][0]
    except (KeyError, IndexError) as exc:
        raise InvalidSlotError(f"FTRL slot must hold z, n, w: {exc}") from None
    g = float(gradient)
    if not math.isfinite(g):
        raise NumericOverflowError(f"non-finite gradient {g}")
    if g == 0.0:
        return {"z": (z,), "n": (n,), "w": (w,)}
    n_new = n + g * g
    sqrt_new = math.sqrt(n_new)
    sigma = (sqrt_new - math.sqrt(n)) / hp.alpha
    z_new = z + g - sigma * w
    if abs(z_new) <= hp.lambda1:
        w_new = 0.0
    else:
        sign = 1.0 if z_new > 0 else -1.0
        w_new = -(z_new - sign * hp.lambda1) / ((hp.beta + sqrt_new) / hp.alpha + hp.lambda2)
    if not (math.isfinite(z_new) and math.isfinite(n_new) and math.isfinite(w_new)):
        raise NumericOverflowError("FTRL update produced a non-finite value")
    return {"z": (z_new,), "n": (n_new,), "w": (w_new,)}


def sgd_update(hp: HyperParams, slot: Mapping[str, Tuple[float, ...]], gradients: Mapping[str, Iterable[float]]) -> Slot:
    out = dict(slot)
    eta = hp.sgd_eta
    for name, grad in gradients.items():
        if name not in slot:
            raise InvalidSlotError(f"gradient for unknown matrix {name!r}")
        cur = slot[name]
        grad = tuple(grad)
        if len(grad) != len(cur):
            raise InvalidSlotError(f"gradient width {len(grad)} != matrix {name!r} width {len(cur)}")
        new = tuple(c - eta * g for c, g in zip(cur, grad))
        if not all(math.isfinite(x) for x in new):
            raise NumericOverflowError(f"SGD update of {name!r} produced a non-finite value")
        out[name] = new
    return out


def apply_update(schema: ModelSchema, slot: Slot, gradients: Mapping[str, Iterable[float]]) -> Slot:
    """Dispatch to the optimizer the schema trains with."""
    if schema.name is SchemaName.LR_FTRL:
        g = gradients.get("w")
        if g is None or len(g) != 1:
            raise InvalidSlotError("LR_FTRL expects a width-1 gradient for 'w'")
        return ftrl_update(schema.hyperparams, slot, g[0])
    return sgd_update(schema.hyperparams, slot, gradients)


def transform_for_serving(schema: ModelSchema, slot: Mapping[str, Tuple[float, ...]]) -> Slot:
    keep = schema.serving_names
    widths = schema.widths
    for name in slot:
        if name not in widths:
            raise InvalidSlotError(f"matrix {name!r} not in schema {schema.name.value}")
    return {name: tuple(slot[name]) for name in keep if name in slot}


def gradient_of_sample(
    schema: ModelSchema, slots: Mapping[int, Slot], sample: Sample, prediction: float
) -> Dict[int, Gradients]:
    """Logistic-loss gradients for every feature present in ``sample``."""
    err = prediction - sample.label
    if schema.name is SchemaName.LR_FTRL:
        return {fid: {"w": (err * x,)} for fid, x in sample.features}

    k = schema.hyperparams.fm_k
    zero_v = (0.0,) * k
    sums = [0.0] * k
    for fid, x in sample.features:
        slot = slots.get(fid)
        if slot is None:
            continue
        v = slot["v"]
        for f in range(k):
            sums[f] += v[f] * x
    out: Dict[int, Gradients] = {}
    for fid, x in sample.features:
        slot = slots.get(fid)
        v = slot["v"] if slot is not None else zero_v
        out[fid] = {
            "w": (err * x,),
            "v": tuple(err * (x * sums[f] - v[f] * x * x) for f in range(k)),
        }
    return out


def add_gradients(acc: Dict[int, List[float]], grads: Mapping[int, Gradients], names: Tuple[str, ...]) -> None:
    """Accumulate per-sample gradients into a flat per-feature buffer (mini-batch sum)."""
    for fid, g in grads.items():
        buf = acc.get(fid)
        flat = [x for name in names for x in g[name]]
        if buf is None:
            acc[fid] = flat
        else:
            for i, x in enumerate(flat):
                buf[i] += x


def split_gradients(flat: List[float], schema: ModelSchema, names: Tuple[str, ...]) -> Gradients:
    widths = schema.widths
    out = {}
    i = 0
    for name in names:
        w = widths[name]
        out[name] = tuple(flat[i : i + w])
        i += w
    return out


def gradient_names(schema: ModelSchema) -> Tuple[str, ...]:
    """Matrix names a gradient push carries for this schema."""
    if schema.name is SchemaName.LR_FTRL:
        return ("w",)
    return ("w", "v")


def log_loss(label: int, prediction: float, eps: float = 1e-15) -> float:
    p = min(max(prediction, eps), 1.0 - eps)
    return -math.log(p) if label == 1 else -math.log(1.0 - p)
