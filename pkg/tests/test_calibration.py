import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sae.calibration import calibrate_linear, calibrate_sample, greg_total
from sae.errors import CalibrationError, DataError

from conftest import make_sample, make_targets


def test_satisfied_constraints_leave_weights():
    w = np.array([2.0, 3.0, 5.0])
    X = np.column_stack([np.ones(3), [1.0, 2.0, 4.0]])
    r = calibrate_linear(w, X, w @ X)
    np.testing.assert_allclose(r.w_cal, w, rtol=1e-14)
    np.testing.assert_allclose(r.lagrange, 0.0, atol=1e-14)


def test_intercept_only_is_ratio_adjustment():
    w = np.array([1.0, 2.0, 3.0, 4.0])
    r = calibrate_linear(w, np.ones((4, 1)), [25.0])
    np.testing.assert_allclose(r.w_cal, w * 25.0 / w.sum(), rtol=1e-14)


def test_two_by_two_hand_system():
    # Oracle: w_cal = w (1 + x' lam), lam solves (sum w x x') lam = target - sum w x.
    w = np.array([1.0, 1.0])
    X = np.array([[1.0, 1.0], [1.0, 3.0]])
    target = np.array([4.0, 10.0])
    T = np.array([[2.0, 4.0], [4.0, 10.0]])
    lam = np.linalg.solve(T, target - np.array([2.0, 4.0]))
    r = calibrate_linear(w, X, target)
    np.testing.assert_allclose(r.lagrange, lam, rtol=1e-12)
    np.testing.assert_allclose(r.w_cal, [1.0, 3.0], rtol=1e-12)
    assert abs(r.w_cal.sum() - 4.0) < 1e-12
    assert abs(r.w_cal @ X[:, 1] - 10.0) < 1e-12


def test_infeasible_when_n_below_p():
    with pytest.raises(CalibrationError, match="infeasible"):
        calibrate_linear(np.ones(2), np.column_stack([np.ones(2), [1, 2], [3, 5]]), [3, 4, 5])


def test_singular_design():
    with pytest.raises(CalibrationError):
        calibrate_linear(np.ones(3), np.column_stack([np.ones(3), np.ones(3)]), [3, 4])


def test_intercept_target_must_equal_N(rng):
    s = make_sample(rng, D=3)
    T = make_targets(rng, s)
    T[1, 0] += 1
    with pytest.raises(DataError):
        calibrate_sample(s, T)


def test_negative_weights_counted():
    w = np.ones(3)
    X = np.column_stack([np.ones(3), [0.0, 1.0, 2.0]])
    r = calibrate_linear(w, X, [3.0, 9.0])
    assert r.negative_count == int(np.sum(r.w_cal <= 0)) > 0


def test_greg_arithmetic():
    assert greg_total([2.0, 4.0], [1.0, 1.0]) == 6.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_constraints_idempotence_and_greg(seed):
    rng = np.random.default_rng(seed)
    s = make_sample(rng, D=4, n_range=(3, 10), weight_noise=0.4)
    T = make_targets(rng, s)
    res = calibrate_sample(s, T)
    for d, a in enumerate(res.sample.areas):
        tot = a.w_cal @ a.X
        assert np.all(np.abs(tot - T[d]) / (1 + np.abs(T[d])) <= 1e-10)
        # GREG of y = x_q is the known total; y = 1 gives N_d
        for q in range(a.p):
            assert abs(greg_total(a.w_cal, a.X[:, q]) - T[d, q]) <= 1e-10 * (1 + abs(T[d, q]))
        again = calibrate_linear(a.w_cal, a.X, T[d]) if np.all(a.w_cal > 0) else None
        if again is not None:
            np.testing.assert_allclose(again.w_cal, a.w_cal, rtol=1e-12, atol=1e-12 * np.abs(a.w_cal).max())
