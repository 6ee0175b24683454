import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dosegan.optim import AdamState, MissingGradError, PlateauScheduler, adam_step
from dosegan.tensor import NonFiniteError, Tensor


def _param(value, grad):
    t = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    t.grad = np.array([grad], dtype=np.float64)
    return t


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, theta=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def test_zero_grads_leave_params_but_advance_step():
    p = _param(1.5, 0.0)
    st_ = AdamState()
    adam_step({"p": p}, st_, 2e-4)
    assert p.data[0] == 1.5 and st_.step == 1 and st_.steps["p"] == 1


def test_first_step_moves_by_lr():
    p = _param(0.0, 1.0)
    adam_step({"p": p}, AdamState(), 2e-4)
    assert p.data[0] == pytest.approx(-2e-4, rel=1e-6)


def test_three_steps_match_scalar_recurrence():
    p = _param(0.0, 1.0)
    st_ = AdamState()
    for g in (1.0, -1.0, 0.5):
        p.grad = np.array([g])
        adam_step({"p": p}, st_, 1e-3)
    assert p.data[0] == pytest.approx(scalar_adam([1.0, -1.0, 0.5], 1e-3), rel=1e-12, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8))
def test_adam_matches_scalar_recurrence_property(grads):
    p = _param(0.0, 0.0)
    s = AdamState()
    for g in grads:
        p.grad = np.array([g])
        adam_step({"p": p}, s, 1e-3)
    assert p.data[0] == pytest.approx(scalar_adam(grads, 1e-3), rel=1e-9, abs=1e-12)


def test_missing_and_nan_grads_are_rejected():
    p = _param(0.0, 0.0)
    p.grad = None
    with pytest.raises(MissingGradError):
        adam_step({"p": p}, AdamState(), 1e-3)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError):
        adam_step({"p": p}, AdamState(), 1e-3)


def test_scheduler_threshold_sequence():
    s = PlateauScheduler(lr=2e-4, patience=1)
    lrs, stops = [], []
    s.step(1.0)
    for _ in range(3):
        lr, stop = s.step(1.0)
        lrs.append(lr)
        stops.append(stop)
    assert lrs == pytest.approx([2e-5, 2e-6, 2e-7])
    assert stops == [False, False, True]


def test_strictly_decreasing_loss_never_reduces():
    s = PlateauScheduler()
    for v in np.linspace(1, 0.1, 20):
        lr, stop = s.step(float(v))
        assert lr == 2e-4 and not stop


def test_six_flat_epochs_give_one_reduction_after_five_stagnant():
    s = PlateauScheduler()
    history = [s.step(1.0)[0] for _ in range(6)]
    # epoch 1 sets the best; epochs 2-6 are the five stagnant ones
    assert history[:5] == [2e-4] * 5 and history[5] == pytest.approx(2e-5)
    assert s.reductions == 1


def test_scheduler_rejects_nan_and_round_trips():
    s = PlateauScheduler()
    with pytest.raises(ValueError):
        s.step(float("nan"))
    s.step(0.5)
    s.step(0.6)
    assert PlateauScheduler.from_dict(s.to_dict()) == s
    assert PlateauScheduler.from_dict(PlateauScheduler().to_dict()).best == math.inf


@pytest.mark.parametrize("kwargs", [dict(factor=1.0), dict(factor=0.0), dict(patience=0), dict(lr=0.0)])
def test_scheduler_rejects_bad_settings(kwargs):
    with pytest.raises(ValueError):
        PlateauScheduler(**kwargs)
