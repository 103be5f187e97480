import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sae.data import AreaUnits, UnitSample
from sae.direct import direct_estimates, direct_mean, direct_variance, psi0_batch
from sae.errors import DataError

from conftest import make_calibrated, make_sample


def _area(y, N, X=None, w=None, w_cal=None):
    n = len(y)
    X = np.ones((n, 1)) if X is None else X
    w = np.full(n, N / n) if w is None else w
    return AreaUnits("a", N, y, X, w, w_cal)


def test_srswor_weights_give_sample_mean():
    a = _area([1.0, 4.0, 7.0, 2.0], 40)
    assert direct_mean(a, "base") == pytest.approx(3.5, abs=1e-14)


def test_calibrated_mean_of_auxiliary_is_population_mean(rng):
    s, T = make_calibrated(rng, D=5)
    for d, a in enumerate(s.areas):
        a2 = AreaUnits(a.area_id, a.N, a.X[:, 1], a.X, a.w, a.w_cal)
        assert direct_mean(a2, "calibrated") == pytest.approx(T[d, 1] / a.N, rel=1e-12)


def test_single_unit_mean_and_variance():
    a = _area([3.25], 5, w_cal=[5.0])
    assert direct_mean(a, "calibrated") == 3.25
    with pytest.raises(DataError):
        direct_variance(a, "base")
    s = UnitSample([a, AreaUnits("b", 10, [1.0, 2.0], np.ones((2, 1)), [5.0, 5.0])])
    est = direct_estimates(s)
    assert np.isnan(est.psi0[0]) and est.psi0[1] > 0


@pytest.mark.parametrize("design", ["srswor", "general", "greg"])
def test_constant_y_and_census(design):
    X = np.column_stack([np.ones(4), [1.0, 2.0, 3.0, 5.0]])
    # greg residuals come from a least-squares solve, so allow rounding
    assert direct_variance(_area([2.0] * 4, 10, X), "base", design) == pytest.approx(0.0, abs=1e-24)
    assert direct_variance(_area([1.0, 3.0, 2.0, 8.0], 4, X), "base", design) == 0.0


def test_srswor_arithmetic():
    assert direct_variance(_area([1.0, 2.0, 3.0], 6), "base", "srswor") == pytest.approx(1 / 6, rel=1e-14)


def test_general_equals_srswor_under_equal_weights():
    y = [1.0, 2.5, 2.0, 7.0, 3.0]
    a = _area(y, 30, w_cal=np.full(5, 6.0))
    v = direct_variance(a, "base", "srswor")
    assert direct_variance(a, "calibrated", "general") == pytest.approx(v, rel=1e-13)
    assert direct_variance(a, "base", "general") == pytest.approx(v, rel=1e-13)


def test_greg_saturated_is_zero():
    X = np.column_stack([np.ones(3), [1.0, 2.0, 4.0], [0.5, 0.1, 0.9]])
    assert direct_variance(_area([1.0, 5.0, 2.0], 30, X), "base", "greg") == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_nonnegative_and_scale_equivariant(seed, c):
    rng = np.random.default_rng(seed)
    s = make_sample(rng, D=3, n_range=(2, 9), weight_noise=0.3)
    for design in ("srswor", "general", "greg"):
        for a in s.areas:
            v = direct_variance(a, "base", design)
            ac = AreaUnits(a.area_id, a.N, c * a.y, a.X, a.w)
            assert v >= 0
            assert direct_variance(ac, "base", design) == pytest.approx(c**2 * v, rel=1e-9, abs=1e-300)


@pytest.mark.parametrize("design", ["srswor", "general", "greg"])
@pytest.mark.parametrize("kind", ["base", "calibrated"])
def test_batch_matches_scalar(rng, design, kind):
    s, _ = make_calibrated(rng, D=5, n_range=(3, 9), weight_noise=0.3)
    Y = np.vstack([s.stacked.y, s.stacked.y * 2 + 1])
    B = psi0_batch(s, Y, kind, design)
    for b in range(2):
        sb = s.with_response(Y[b])
        ref = [direct_variance(a, kind, design) for a in sb.areas]
        np.testing.assert_allclose(B[b], ref, rtol=1e-10, atol=1e-15)
