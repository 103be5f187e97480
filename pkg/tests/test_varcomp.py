import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sae.data import AreaDataset, AreaUnits, UnitSample, aggregate
from sae.errors import DataError, IdentificationError
from sae.varcomp import (
    BHFDesign, fit_bhf_batch, fit_reml_bhf, fit_reml_fh, fit_reml_structured_area, pseudo_beta_batch,
    pseudo_beta_unit, pseudo_stats, reml_loglik_bhf, reml_loglik_fh, reml_loglik_structured, structure_constants,
    wls_beta_area,
)

import oracles
from conftest import make_calibrated, make_sample


def area_data(rng, D=20, su=0.05, p=2, psi=None):
    Xbar = np.column_stack([np.ones(D)] + [rng.gamma(3.0, 1.0, D) for _ in range(p - 1)])
    psi = rng.uniform(0.02, 0.3, D) if psi is None else np.broadcast_to(psi, (D,)).astype(float)
    y = Xbar @ np.linspace(1.0, 0.5, p) + rng.normal(0, np.sqrt(su), D) + rng.normal(0, np.sqrt(psi))
    N = np.full(D, 500.0)
    n = rng.integers(2, 20, D)
    return AreaDataset([f"a{d:02d}" for d in range(D)], N, n, y, Xbar, psi * N**2 * n / 100, N, psi)


def test_loglik_matches_dense_oracle_up_to_constant(rng):
    data = area_data(rng, D=10)
    diffs = [reml_loglik_fh(s, data, data.psi0) - oracles.fh_loglik(s, data.ybar, data.Xbar, data.psi0)
             for s in (0.0, 0.01, 0.3, 2.0)]
    np.testing.assert_allclose(diffs, diffs[0], atol=1e-10)


def test_fh_zero_residuals_boundary(rng):
    data = area_data(rng, D=12)
    exact = AreaDataset(data.area_id, data.N, data.n, data.Xbar @ [1.0, 2.0], data.Xbar, data.W2, data.wdot,
                        data.psi0)
    with pytest.warns(UserWarning):
        fit = fit_reml_fh(exact)
    assert fit.sigma_u2 == 0.0
    assert "sigma_u2" in fit.boundary


@pytest.mark.parametrize("seed", range(5))
def test_fh_equal_psi_closed_form(seed):
    rng = np.random.default_rng(seed)
    data = area_data(rng, D=15, su=0.2, psi=0.05, p=3)
    X, y = data.Xbar, data.ybar
    b = np.linalg.lstsq(X, y, rcond=None)[0]
    s2 = np.sum((y - X @ b) ** 2) / (data.D - data.p)
    fit = fit_reml_fh(data)
    assert fit.sigma_u2 == pytest.approx(max(0.0, s2 - 0.05), rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_fh_grid_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    data = area_data(rng, D=int(rng.integers(8, 26)), su=0.01 * (seed + 1))
    fit = fit_reml_fh(data)
    ub = 5 * max(np.var(data.ybar), data.psi0.max())
    s = oracles.zoom_grid_max(lambda v: oracles.fh_loglik(v, data.ybar, data.Xbar, data.psi0), 0.0, ub)
    assert abs(fit.sigma_u2 - s) <= 1e-6
    # beta is the WLS solution at the fitted sigma_u2
    V = fit.sigma_u2 + data.psi0
    X = data.Xbar
    b = np.linalg.solve(X.T @ (X / V[:, None]), X.T @ (data.ybar / V))
    np.testing.assert_allclose(fit.beta, b, rtol=1e-10)


def test_wls_beta_hand_cases():
    data = AreaDataset(["a", "b", "c"], [9, 9, 9], [3, 3, 3], [1.0, 2.0, 3.0], np.ones((3, 1)), [27.0] * 3,
                       [9.0] * 3, [0.1, 0.1, 0.1])
    assert wls_beta_area(0.1, data.psi0, data)[0] == pytest.approx(2.0, rel=1e-14)
    X = np.array([[1.0, 0.5], [1.0, 2.0], [1.0, 3.5]])
    y = np.array([1.0, 4.0, 2.0])
    psi = np.array([0.1, 0.2, 0.4])
    data = AreaDataset(["a", "b", "c"], [9, 9, 9], [3, 3, 3], y, X, [27.0] * 3, [9.0] * 3, psi)
    w = 1.0 / (0.3 + psi)
    A = np.array([[w.sum(), w @ X[:, 1]], [w @ X[:, 1], w @ X[:, 1] ** 2]])
    rhs = np.array([w @ y, w @ (X[:, 1] * y)])
    np.testing.assert_allclose(wls_beta_area(0.3, psi, data), np.linalg.solve(A, rhs), rtol=1e-12)


def _structured(rng, D=20, su=0.02, se=0.5, zero_e=False):
    Xbar = np.column_stack([np.ones(D), rng.gamma(3.0, 1.0, D)])
    c = rng.choice([0.05, 0.2, 0.5, 1.0], D)
    e = 0.0 if zero_e else rng.normal(0, np.sqrt(se * c))
    y = Xbar @ [1.0, 0.5] + rng.normal(0, np.sqrt(su), D) + e
    N = np.full(D, 100.0)
    data = AreaDataset([f"a{d:02d}" for d in range(D)], N, np.full(D, 5), y, Xbar, c * N**2, N)
    return data, c


def test_structured_equal_c_not_identified(rng):
    data, _ = _structured(rng)
    with pytest.raises(IdentificationError):
        fit_reml_structured_area(data, np.full(data.D, 0.3))


def test_structured_needs_three_areas(rng):
    data, c = _structured(rng, D=2)
    with pytest.raises(DataError):
        fit_reml_structured_area(data, c)


@pytest.mark.parametrize("seed", range(4))
def test_structured_two_d_grid_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    data, c = _structured(rng, D=int(rng.integers(10, 26)))
    fit = fit_reml_structured_area(data, c)
    top = 4 * np.var(data.ybar) / c.min()
    a, b = oracles.nested_grid_max_2d(data.ybar, data.Xbar, c, 4 * np.var(data.ybar), (1e-9, top))
    assert abs(fit.sigma_u2 - a) <= 1e-5
    assert abs(fit.sigma_e2 - b) <= 1e-5


def test_structured_two_distinct_c_values(rng):
    D = 16
    data, _ = _structured(rng, D=D)
    c = np.where(np.arange(D) % 2 == 0, 0.1, 0.6)
    fit = fit_reml_structured_area(data, c)
    a, b = oracles.nested_grid_max_2d(data.ybar, data.Xbar, c, 4 * np.var(data.ybar), (1e-9, 40 * np.var(data.ybar)))
    assert abs(fit.sigma_u2 - a) <= 1e-5 and abs(fit.sigma_e2 - b) <= 1e-5


def test_structured_zero_sampling_error():
    # e_d = 0 and area effects of equal size: nothing in the data scales with c_d
    D = 24
    Xbar = np.column_stack([np.ones(D), np.arange(D) % 3])
    c = np.tile([0.05, 0.2, 0.5, 1.0], D // 4)
    u = 0.5 * np.where(np.arange(D) % 2 == 0, 1.0, -1.0)
    N = np.full(D, 100.0)
    data = AreaDataset([f"a{d:02d}" for d in range(D)], N, np.full(D, 5), Xbar @ [1.0, 0.5] + u, Xbar,
                       c * N**2, N)
    fit = fit_reml_structured_area(data, c)
    assert fit.sigma_e2 == 0.0
    assert "sigma_e2" in fit.boundary


def test_structured_reparameterization_consistency(rng):
    # c_d = 1/n_d on SRSWOR aggregates: refitting FH with psi = sigma_e2/n_d returns the same sigma_u2
    s = make_sample(rng, D=20, n_range=(2, 12), sigma_u2=0.1, sigma_e2=0.5)
    data = aggregate(s, False, np.array([a.X.mean(axis=0) for a in s.areas]))
    c = 1.0 / s.n_d
    np.testing.assert_allclose(structure_constants(data, "srswor").c, c)
    fit = fit_reml_structured_area(data, c)
    np.testing.assert_allclose(fit.psi, fit.sigma_e2 * c, rtol=1e-15)
    fh = fit_reml_fh(data, fit.sigma_e2 * c)
    assert fh.sigma_u2 == pytest.approx(fit.sigma_u2, rel=1e-8, abs=1e-12)


def test_bhf_perfect_fit():
    rng = np.random.default_rng(1)
    areas = []
    for d in range(5):
        X = np.column_stack([np.ones(4), rng.normal(size=4)])
        areas.append(AreaUnits(f"a{d}", 50, X @ [1.0, -2.0], X, np.full(4, 12.5)))
    with pytest.warns(UserWarning):
        fit = fit_reml_bhf(UnitSample(areas))
    assert fit.sigma_u2 == 0.0 and fit.sigma_e2 == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_bhf_balanced_anova_closed_form(seed):
    rng = np.random.default_rng(seed)
    D, m = 12, 6
    u = rng.normal(0, 0.8, D)
    areas = [AreaUnits(f"a{d:02d}", 100, 2.0 + u[d] + rng.normal(0, 1.0, m), np.ones((m, 1)), np.full(m, 100 / m))
             for d in range(D)]
    s = UnitSample(areas)
    Y = np.array([a.y for a in s.areas])
    msw = np.sum((Y - Y.mean(axis=1, keepdims=True)) ** 2) / (D * (m - 1))
    msb = m * np.sum((Y.mean(axis=1) - Y.mean()) ** 2) / (D - 1)
    fit = fit_reml_bhf(s)
    if msb > msw:
        assert fit.sigma_e2 == pytest.approx(msw, rel=1e-6)
        assert fit.sigma_u2 == pytest.approx((msb - msw) / m, rel=1e-6)
    else:
        assert fit.sigma_u2 == 0.0


def test_bhf_dense_oracle(rng):
    s = make_sample(rng, D=8, n_range=(2, 6), sigma_u2=0.2, sigma_e2=0.3)
    fit = fit_reml_bhf(s)
    X, y = s.stacked.X, s.stacked.y
    f = lambda a, b: oracles.reml_loglik(oracles.bhf_covariance(s, a, b), X, y)
    a, b = oracles.zoom_grid_max_2d(f, ((0.0, 3.0), (1e-3, 3.0)), points=40, levels=6)
    assert fit.sigma_u2 == pytest.approx(a, abs=1e-5)
    assert fit.sigma_e2 == pytest.approx(b, abs=1e-5)
    diffs = [reml_loglik_bhf(a_, b_, s) - f(a_, b_) for a_, b_ in ((0.0, 0.5), (0.3, 0.2), (2.0, 1.0))]
    np.testing.assert_allclose(diffs, diffs[0], atol=1e-9)


def test_bhf_consistency_at_full_sample():
    from sae.simulate import SimConfig, draw_srswor, generate_covariates
    cfg = SimConfig()
    frame = generate_covariates(cfg, seed=3)
    s = draw_srswor(frame, cfg.n_d, 3)
    assert s.n == 415
    des = BHFDesign.from_sample(s)
    rng = np.random.default_rng(5)
    xb = s.stacked.X @ cfg.beta
    Y = xb + rng.normal(0, 0.1, (200, s.D))[:, s.stacked.area] + rng.normal(0, 0.3, (200, s.n))
    fb = fit_bhf_batch(Y, des)
    assert abs(fb.sigma_e2.mean() / 0.09 - 1) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fits_beat_audit_grid(seed):
    rng = np.random.default_rng(seed)
    data = area_data(rng, D=int(rng.integers(6, 20)), su=float(rng.uniform(0, 0.2)))
    fit = fit_reml_fh(data)
    assert fit.sigma_u2 >= 0
    for s in np.linspace(0, 5 * np.var(data.ybar) + 1, 100):
        assert fit.loglik_restricted >= reml_loglik_fh(s, data, data.psi0) - 1e-8
    d2, c = _structured(rng, D=int(rng.integers(6, 20)))
    sf = fit_reml_structured_area(d2, c)
    assert sf.sigma_u2 >= 0 and sf.sigma_e2 >= 0
    for a in np.linspace(0, 2 * np.var(d2.ybar), 10):
        for b in np.linspace(0, 4 * np.var(d2.ybar) / c.min(), 10):
            assert sf.loglik_restricted >= reml_loglik_structured(a, b, d2, c) - 1e-8
    s = make_sample(rng, D=5, n_range=(2, 5))
    bf = fit_reml_bhf(s)
    assert bf.sigma_u2 >= 0 and bf.sigma_e2 >= 0
    for a in np.linspace(0, 1, 10):
        for b in np.linspace(0.01, 1, 10):
            assert bf.loglik_restricted >= reml_loglik_bhf(a, b, s) - 1e-8


def test_pseudo_beta_gamma_zero_is_weighted_ols(rng):
    s, _ = make_calibrated(rng, D=6, weight_noise=0.3)
    for kind, cal in (("base", False), ("calibrated", True)):
        b = pseudo_beta_unit(0.0, 1.0, s, kind)
        X, y = s.stacked.X, s.stacked.y
        w = s.stacked.w_cal if cal else s.stacked.w
        ref = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
        np.testing.assert_allclose(b, ref, rtol=1e-10)


def test_pseudo_beta_one_area_equal_weights_is_ols():
    rng = np.random.default_rng(3)
    X = np.column_stack([np.ones(6), rng.normal(size=6)])
    y = rng.normal(size=6)
    s = UnitSample([AreaUnits("a", 60, y, X, np.full(6, 10.0))])
    np.testing.assert_allclose(pseudo_beta_unit(0.0, 1.0, s), np.linalg.lstsq(X, y, rcond=None)[0], rtol=1e-10)


def test_pseudo_beta_hand_case():
    X1 = np.array([[1.0, 0.3], [1.0, 1.2], [1.0, 2.0]])
    X2 = np.array([[1.0, -0.5], [1.0, 0.4], [1.0, 1.5]])
    s = UnitSample([AreaUnits("a", 30, [1.0, 2.0, 2.5], X1, [8.0, 10.0, 12.0]),
                    AreaUnits("b", 20, [0.2, 1.1, 0.9], X2, [5.0, 7.0, 8.0])])
    gamma = np.array([0.5, 0.5])
    beta, _ = pseudo_beta_batch(gamma[None], s.stacked.y[None], pseudo_stats(s, "base"))
    np.testing.assert_allclose(beta[0], oracles.pseudo_beta(s, gamma, False), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_pseudo_beta_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    s, _ = make_calibrated(rng, D=5, weight_noise=0.3)
    su, se = rng.uniform(0.01, 1), rng.uniform(0.01, 1)
    for kind, cal in (("base", False), ("calibrated", True)):
        ps = pseudo_stats(s, kind)
        g = su / (su + se * ps.c)
        np.testing.assert_allclose(pseudo_beta_unit(su, se, s, kind), oracles.pseudo_beta(s, g, cal),
                                   rtol=1e-9, atol=1e-10)


def test_oracle_forms_agree(rng):
    data = area_data(rng, D=9)
    s = np.array([0.0, 0.1, 1.0])
    many = oracles.fh_loglik_many(s, data.ybar, data.Xbar, np.broadcast_to(data.psi0, (3, data.D)))
    dense = [oracles.fh_loglik(v, data.ybar, data.Xbar, data.psi0) for v in s]
    np.testing.assert_allclose(many, dense, rtol=1e-12)
