import numpy as np
import pytest

from sae.calibration import calibrate_sample
from sae.data import AreaUnits, UnitSample, aggregate


def make_sample(rng, D=6, n_range=(3, 8), p=3, N_range=(40, 200), beta=(4.0, 0.5, -0.4),
                sigma_u2=0.05, sigma_e2=0.2, weight_noise=0.0):
    """Random unit sample from a nested-error model with Gamma covariates."""
    beta = np.asarray(beta[:p], dtype=float)
    areas = []
    for d in range(D):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        N = int(rng.integers(max(N_range[0], n), N_range[1] + 1))
        X = np.column_stack([np.ones(n)] + [rng.gamma(2.0 + q, 1.0, n) for q in range(p - 1)])
        u = rng.normal(0, np.sqrt(sigma_u2))
        y = X @ beta + u + rng.normal(0, np.sqrt(sigma_e2), n)
        w = np.full(n, N / n) * np.exp(weight_noise * rng.standard_normal(n))
        areas.append(AreaUnits(f"a{d:02d}", N, y, X, w))
    return UnitSample(areas)


def make_targets(rng, sample, spread=0.15):
    """Population totals near the weighted sample totals, intercept total = N_d."""
    T = []
    for a in sample.areas:
        xbar = a.w @ a.X / a.w.sum()
        t = a.N * xbar * (1 + spread * rng.uniform(-1, 1, a.p))
        t[0] = a.N
        T.append(t)
    return np.array(T)


def make_calibrated(rng, **kw):
    s = make_sample(rng, **kw)
    T = make_targets(rng, s)
    return calibrate_sample(s, T).sample, T


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def cal_case(rng):
    s, T = make_calibrated(rng, D=8)
    data = aggregate(s, True, T / s.N[:, None])
    return s, T, data


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
