import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ftrl_reference
from weips.core_model import (
    SERVING,
    TRAINING,
    HyperParams,
    ModelSchema,
    Sample,
    apply_update,
    ftrl_update,
    gradient_of_sample,
    initial_slot,
    predict,
    sgd_update,
    sigmoid,
    transform_for_serving,
    validate_slot,
    zero_slot,
)
from weips.errors import InvalidSlotError, NumericOverflowError

LR = ModelSchema.lr_ftrl()


def fm(k=2):
    return ModelSchema.fm_sgd(HyperParams(fm_k=k))


def zero_ftrl():
    return {"z": (0.0,), "n": (0.0,), "w": (0.0,)}


# predict ---------------------------------------------------------------------


def test_empty_model_predicts_half():
    assert predict(LR, {}, Sample(1, ((7, 3.0), (9, -1.0)))) == 0.5


def test_lr_single_weight():
    p = predict(LR, {3: {"w": (2.0,)}}, Sample(1, ((3, 1.0),)))
    assert p == pytest.approx(1 / (1 + math.exp(-2.0)))
    assert p == pytest.approx(0.8808, abs=1e-4)


def test_fm_pairwise_term():
    slots = {1: {"w": (0.0,), "v": (1.0, 0.0)}, 2: {"w": (0.0,), "v": (1.0, 0.0)}}
    assert predict(fm(2), slots, Sample(1, ((1, 1.0), (2, 1.0)))) == pytest.approx(0.7311, abs=1e-4)


def test_fm_slot_with_wrong_width_is_rejected():
    with pytest.raises(InvalidSlotError):
        predict(fm(2), {1: {"w": (0.0,), "v": (1.0,)}}, Sample(0, ((1, 1.0),)))


def test_unknown_view_rejected():
    with pytest.raises(ValueError):
        predict(LR, {}, Sample(0, ()), view="offline")


def test_sigmoid_is_stable_at_extremes():
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(1000.0) == 1.0


# optimizers ------------------------------------------------------------------


def test_ftrl_zero_gradient_keeps_slot():
    slot = {"z": (0.3,), "n": (2.0,), "w": (-0.1,)}
    assert ftrl_update(HyperParams(), slot, 0.0) == slot


def test_ftrl_first_step_reference_value():
    hp = HyperParams(alpha=0.1, beta=1.0, lambda1=0.0, lambda2=0.0)
    out = ftrl_update(hp, zero_ftrl(), 1.0)
    assert out["z"] == (1.0,)
    assert out["n"] == (1.0,)
    assert out["w"][0] == pytest.approx(-0.05, rel=1e-15)


def test_ftrl_l1_dead_zone():
    assert ftrl_update(HyperParams(lambda1=10.0), zero_ftrl(), 1.0)["w"] == (0.0,)


def test_ftrl_rejects_non_finite_gradient():
    with pytest.raises(NumericOverflowError):
        ftrl_update(HyperParams(), zero_ftrl(), float("nan"))


def test_ftrl_overflow_is_rejected_not_stored():
    with pytest.raises(NumericOverflowError):
        ftrl_update(HyperParams(), zero_ftrl(), 1e200)


def test_ftrl_slot_missing_accumulator():
    with pytest.raises(InvalidSlotError):
        ftrl_update(HyperParams(), {"w": (0.0,)}, 1.0)


def test_sgd_examples():
    assert sgd_update(HyperParams(sgd_eta=0.5), {"w": (1.0,)}, {"w": (0.0,)}) == {"w": (1.0,)}
    assert sgd_update(HyperParams(sgd_eta=0.5), {"w": (1.0,)}, {"w": (0.4,)})["w"][0] == pytest.approx(0.8)
    v = sgd_update(HyperParams(sgd_eta=0.1), {"v": (1.0, 2.0)}, {"v": (10.0, -10.0)})["v"]
    assert v == pytest.approx((0.0, 3.0))


def test_sgd_width_mismatch():
    with pytest.raises(InvalidSlotError):
        sgd_update(HyperParams(), {"v": (1.0, 2.0)}, {"v": (1.0,)})


def test_apply_update_dispatches_by_schema():
    out = apply_update(LR, zero_ftrl(), {"w": (1.0,)})
    assert set(out) == {"z", "n", "w"}
    out = apply_update(fm(2), {"w": (0.0,), "v": (0.0, 0.0)}, {"w": (1.0,), "v": (0.0, 0.0)})
    assert out["w"][0] == pytest.approx(-HyperParams().sgd_eta)


# transforms ------------------------------------------------------------------


def test_transform_drops_training_only_matrices():
    assert transform_for_serving(LR, {"z": (1.0,), "n": (1.0,), "w": (-0.05,)}) == {"w": (-0.05,)}
    assert transform_for_serving(LR, {"z": (0.0,), "n": (0.0,), "w": (0.0,)}) == {"w": (0.0,)}
    slot = {"w": (1.0,), "v": (1.0, 2.0)}
    assert transform_for_serving(fm(2), slot) == slot


def test_transform_rejects_foreign_matrix():
    with pytest.raises(InvalidSlotError):
        transform_for_serving(LR, {"w": (0.0,), "q": (1.0,)})


def test_zero_slots_per_view():
    assert zero_slot(LR, TRAINING) == zero_ftrl()
    assert zero_slot(LR, SERVING) == {"w": (0.0,)}


def test_fm_initial_latent_vectors_are_deterministic_and_nonzero():
    a, b = initial_slot(fm(4), 123), initial_slot(fm(4), 123)
    assert a == b
    assert any(x != 0.0 for x in a["v"])
    validate_slot(fm(4), a)


# gradients -------------------------------------------------------------------


def test_lr_gradient_sign():
    g = gradient_of_sample(LR, {}, Sample(1, ((3, 2.0),)), 0.5)
    assert g[3]["w"] == (-1.0,)
    g = gradient_of_sample(LR, {}, Sample(0, ((3, 2.0),)), 0.5)
    assert g[3]["w"] == (1.0,)


def test_gradient_vanishes_when_prediction_equals_label():
    slots = {1: {"w": (0.2,), "v": (0.3, -0.1)}}
    g = gradient_of_sample(fm(2), slots, Sample(1, ((1, 1.0),)), 1.0)
    assert g[1]["w"] == (0.0,)
    assert all(x == 0.0 for x in g[1]["v"])


# schema / samples ------------------------------------------------------------


def test_hyperparams_validation():
    for bad in ({"alpha": 0}, {"beta": -1}, {"lambda1": -0.1}, {"lambda2": -1}, {"sgd_eta": 0}, {"fm_k": 0}):
        with pytest.raises(ValueError):
            HyperParams(**bad)


def test_schema_round_trip():
    s = fm(3)
    assert ModelSchema.from_dict(s.to_dict()) == s


def test_sample_rejects_duplicates_and_bad_values():
    with pytest.raises(ValueError):
        Sample(1, ((1, 1.0), (1, 2.0)))
    with pytest.raises(ValueError):
        Sample(2, ())
    with pytest.raises(ValueError):
        Sample(1, ((1, float("inf")),))


def test_validate_slot_width():
    with pytest.raises(InvalidSlotError):
        validate_slot(LR, {"z": (0.0, 1.0), "n": (0.0,), "w": (0.0,)})


# properties ------------------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False)
hyper = st.builds(
    HyperParams,
    alpha=st.floats(0.01, 2.0),
    beta=st.floats(0.0, 3.0),
    lambda1=st.floats(0.0, 3.0),
    lambda2=st.floats(0.0, 3.0),
)


@settings(max_examples=300, deadline=None)
@given(hyper, st.lists(finite, min_size=1, max_size=30))
def test_ftrl_sparsity_invariant(hp, grads):
    slot = zero_ftrl()
    for g in grads:
        slot = ftrl_update(hp, slot, g)
        if abs(slot["z"][0]) <= hp.lambda1:
            assert slot["w"][0] == 0.0


@settings(max_examples=300, deadline=None)
@given(hyper, st.lists(finite, min_size=1, max_size=30))
def test_ftrl_matches_vectorised_reference(hp, grads):
    slot = zero_ftrl()
    for g in grads:
        slot = ftrl_update(hp, slot, g)
    z, n, w = ftrl_reference(hp.alpha, hp.beta, hp.lambda1, hp.lambda2, np.array(grads).reshape(-1, 1))
    assert slot["z"][0] == pytest.approx(z[0], rel=1e-10, abs=1e-300)
    assert slot["n"][0] == pytest.approx(n[0], rel=1e-10, abs=1e-300)
    assert slot["w"][0] == pytest.approx(w[0], rel=1e-10, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=3, max_size=3))
def test_transform_is_idempotent(vals):
    slot = {"z": (vals[0],), "n": (abs(vals[1]),), "w": (vals[2],)}
    once = transform_for_serving(LR, slot)
    assert transform_for_serving(LR, once) == once


@settings(max_examples=200, deadline=None)
@given(
    st.dictionaries(st.integers(0, 20), st.tuples(finite, st.floats(0, 50), finite), max_size=10),
    st.lists(st.tuples(st.integers(0, 20), st.floats(-3, 3)), max_size=6, unique_by=lambda t: t[0]),
    st.integers(0, 1),
)
def test_lr_prediction_same_on_training_and_serving_view(table, feats, label):
    slots = {fid: {"z": (z,), "n": (n,), "w": (w,)} for fid, (z, n, w) in table.items()}
    serving = {fid: transform_for_serving(LR, s) for fid, s in slots.items()}
    sample = Sample(label, tuple(feats))
    assert predict(LR, slots, sample, TRAINING) == predict(LR, serving, sample, SERVING)
