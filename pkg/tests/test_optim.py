import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fixmatch.optim import EMA, SGD, Adam, Schedule, adam_step, ema_update, lr_at, sgd_step


def test_cosine_endpoints():
    s = Schedule("cosine", 0.03, 1000)
    assert lr_at(s, 0) == 0.03
    assert lr_at(s, 1000) == pytest.approx(0.195090 * 0.03, abs=1e-6 * 0.03)
    assert lr_at(s, 1000) / 0.03 == pytest.approx(math.cos(7 * math.pi / 16), abs=1e-12)


def test_cosine_strictly_decreasing():
    s = Schedule("cosine", 1.0, 1000)
    vals = np.array([lr_at(s, k) for k in range(1001)])
    assert np.all(np.diff(vals) < 0)


def test_linear_and_constant():
    lin = Schedule("linear", 0.03, 100)
    assert lr_at(lin, 0) == 0.03
    assert lr_at(lin, 100) == pytest.approx(0.01)
    assert lr_at(Schedule("constant", 0.5, 10), 7) == 0.5


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule("step", 0.1, 10)
    with pytest.raises(ValueError):
        Schedule("cosine", 0.0, 10)
    with pytest.raises(ValueError):
        lr_at(Schedule("cosine", 0.1, 10), 11)


def test_sgd_nesterov_one_step_by_hand():
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, 0.5])]
    opt = SGD(p, momentum=0.9, nesterov=True)
    opt.step(p, g, lr=0.1, weight_decay=0.0)
    # v = g; update = lr * (beta * v + g) = 0.1 * 1.9 * g
    np.testing.assert_allclose(p[0], [1.0 - 0.095, -2.0 - 0.095])
    opt.step(p, g, lr=0.1)
    # v = 0.9 * 0.5 + 0.5 = 0.95; update = 0.1 * (0.9 * 0.95 + 0.5)
    np.testing.assert_allclose(p[0][0], 0.905 - 0.1 * (0.855 + 0.5))


def test_sgd_plain_momentum_and_weight_decay():
    p = [np.array([2.0])]
    opt = SGD(p, momentum=0.5, nesterov=False)
    opt.step(p, [np.array([0.0])], lr=0.1, weight_decay=0.1)
    np.testing.assert_allclose(p[0], [2.0 - 0.1 * 0.2])


def test_zero_lr_leaves_params():
    p = [np.ones(3)]
    sgd_step(SGD(p), p, [np.ones(3)], 0.0, 0.1)
    adam_step(Adam(p), p, [np.ones(3)], 0.0, 0.1)
    np.testing.assert_array_equal(p[0], np.ones(3))


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([1.0, 1.0])]
    opt = Adam(p)
    opt.step(p, [np.array([3.0, -0.2])], lr=0.01)
    np.testing.assert_allclose(p[0], [0.99, 1.01], atol=1e-8)


def test_non_finite_gradients_raise():
    p = [np.ones(2)]
    with pytest.raises(FloatingPointError, match="step 0"):
        SGD(p).step(p, [np.array([np.nan, 0.0])], 0.1)
    with pytest.raises(FloatingPointError):
        Adam(p).step(p, [np.array([np.inf, 0.0])], 0.1)


def test_optimizer_state_round_trip():
    rng = np.random.default_rng(0)
    for cls in (SGD, Adam):
        p1 = [rng.standard_normal(4)]
        p2 = [p1[0].copy()]
        a, b = cls(p1), cls(p2)
        gs = [[rng.standard_normal(4)] for _ in range(6)]
        for g in gs[:3]:
            a.step(p1, g, 0.01, 1e-3)
            b.step(p2, g, 0.01, 1e-3)
        b2 = cls(p2)
        b2.load_state_arrays([x.copy() for x in b.state_arrays()], b.steps)
        for g in gs[3:]:
            a.step(p1, g, 0.01, 1e-3)
            b2.step(p2, g, 0.01, 1e-3)
        np.testing.assert_array_equal(p1[0], p2[0])


def test_ema():
    shadow = EMA([np.zeros(2)], decay=0.999)
    ema_update(shadow, [np.ones(2)])
    np.testing.assert_allclose(shadow.shadow[0], 0.001)
    frozen = EMA([np.ones(2)], decay=1.0)
    frozen.update([np.full(2, 5.0)])
    np.testing.assert_array_equal(frozen.shadow[0], 1.0)
    with pytest.raises(ValueError):
        EMA([np.ones(2)], decay=1.5)


@given(st.floats(0.0, 1.0), st.integers(1, 50))
def test_ema_stays_between_extremes(decay, n):
    rng = np.random.default_rng(n)
    vals = rng.uniform(-1, 1, (n, 3))
    e = EMA([vals[0]], decay)
    for v in vals[1:]:
        e.update([v])
    assert np.all(e.shadow[0] >= vals.min(axis=0) - 1e-12)
    assert np.all(e.shadow[0] <= vals.max(axis=0) + 1e-12)


def test_sgd_minimises_a_quadratic():
    p = [np.array([5.0, -3.0])]
    opt = SGD(p, 0.9, True)
    for _ in range(200):
        opt.step(p, [2.0 * p[0]], 0.05)
    assert np.abs(p[0]).max() < 1e-3
