"""REML fitting of variance components and the regression-coefficient estimators.

Three model specifications are covered:

* Fay-Herriot with known error variances psi_d (``fit_reml_fh``);
* Fay-Herriot with structured variances psi_d = sigma_e^2 c_d, fitted from
  area aggregates only (``fit_reml_structured_area``);
* the unit-level nested-error model y = x'beta + u_d + e (``fit_reml_bhf``).

Every fit reduces to a bounded one-dimensional search. The structured and
nested-error likelihoods have their overall scale profiled out analytically,
leaving a mixing parameter (variance share t in [0, 1], or the ratio
rho = sigma_u^2 / sigma_e^2) to be searched. All kernels accept a batch of
responses so that bootstrap and Monte Carlo replicates are fitted together.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import AreaDataset, UnitSample
from .errors import ConfigError, ConvergenceError, DataError, IdentificationError, SingularDesignError
from .optimize import maximize_batched

LOG2PI = np.log(2.0 * np.pi)
RTOL = 1e-10
COND_MAX = 1e14
UPPER_FACTOR = 100.0

# search grids in units of the upper bound / on the ratio scale
_FH_GRID = np.concatenate([[0.0], np.geomspace(1e-10, 1.0, 71)])
_T_GRID = np.unique(np.concatenate([
    np.linspace(0.0, 1.0, 51), np.geomspace(1e-8, 0.02, 17), 1.0 - np.geomspace(1e-8, 0.02, 17),
]))
_RHO_GRID = np.concatenate([[0.0], np.geomspace(1e-8, 1e8, 81)])


@dataclass
class VarComponentFit:
    """Fitted regression coefficients and variance components.

    ``psi`` holds the per-area error variances implied by the fit (the known
    psi for ``reml-fh``, sigma_e^2 c_d for ``reml-structured-area`` and
    sigma_e^2 / n_d for ``reml-bhf``). ``boundary`` names any parameter that
    was truncated at zero.
    """

    beta: np.ndarray
    sigma_u2: float
    sigma_e2: float | None
    psi: np.ndarray
    method: str
    loglik_restricted: float
    converged: bool
    iterations: int
    boundary: tuple[str, ...] = ()
    max_leverage: float = float("nan")
    notes: list[str] = field(default_factory=list)

    def report_rows(self) -> list[tuple[str, object]]:
        rows = [(f"beta_{j}", b) for j, b in enumerate(self.beta)]
        rows += [
            ("sigma_u2", self.sigma_u2),
            ("sigma_e2", float("nan") if self.sigma_e2 is None else self.sigma_e2),
            ("loglik_restricted", self.loglik_restricted),
            ("converged", int(self.converged)),
            ("iterations", self.iterations),
            ("boundary", ";".join(self.boundary) or "none"),
            ("max_leverage", self.max_leverage),
            ("method", self.method),
        ]
        return rows


@dataclass(frozen=True)
class StructureConstants:
    """c_d with psi_d(sigma_e^2) = sigma_e^2 c_d."""

    c: np.ndarray
    source: str


@dataclass(frozen=True)
class FitBatch:
    beta: np.ndarray  # (B, p)
    sigma_u2: np.ndarray
    sigma_e2: np.ndarray | None
    loglik: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    u_at_zero: np.ndarray
    e_at_zero: np.ndarray | None


def structure_constants(data: AreaDataset, source: str) -> StructureConstants:
    if source == "base":
        c = data.W2 / data.wdot**2
    elif source == "calibrated":
        c = data.W2 / data.N**2
    elif source == "srswor":
        c = 1.0 / data.n.astype(float)
    else:
        raise ConfigError(f"unknown structure source {source!r}")
    return StructureConstants(c=c, source=source)


def unit_structure_constants(sample: UnitSample, kind: str) -> np.ndarray:
    """c_d computed from unit weights: sum w^2 / w.^2 (base) or sum w_cal^2 / N^2."""
    if kind == "calibrated":
        return np.array([np.sum(a.weights(True) ** 2) / a.N**2 for a in sample.areas])
    return np.array([np.sum(a.w**2) / a.w.sum() ** 2 for a in sample.areas])


def leverages(Xbar: np.ndarray) -> np.ndarray:
    """h_dd = X_d' (sum X X')^-1 X_d."""
    G = np.linalg.pinv(Xbar.T @ Xbar)
    return np.einsum("dp,pq,dq->d", Xbar, G, Xbar)


def _check_design(A: np.ndarray, what: str):
    A = np.atleast_3d(A) if A.ndim == 2 else A
    cond = np.linalg.cond(A)
    if np.any(~np.isfinite(cond) | (cond > COND_MAX)):
        raise SingularDesignError(f"{what}: rank-deficient design matrix")


# --------------------------------------------------------------------------
# regression coefficients


def wls_beta_area(sigma_u2: float, psi, data: AreaDataset) -> np.ndarray:
    """WLS estimator (sum g X X')^-1 sum g X ybar with g_d = gamma_d.

    Computed with weights 1/(sigma_u^2 + psi_d), which differ from gamma_d
    by the common factor sigma_u^2; this also gives the right limit at
    sigma_u^2 = 0.
    """
    psi = np.asarray(psi, dtype=float)
    v = sigma_u2 + psi
    if np.any(v <= 0):
        raise ConfigError("sigma_u2 + psi_d must be positive for every area")
    w = 1.0 / v
    X = data.Xbar
    A = (X.T * w) @ X
    _check_design(A[None], "area-level WLS")
    return np.linalg.solve(A, (X.T * w) @ data.ybar)


@dataclass(frozen=True)
class PseudoStats:
    WX: np.ndarray  # w_i x_i, (n, p)
    Swxx: np.ndarray  # sum_i w x x', (p, p)
    Sx: np.ndarray  # per-area sum w x, (D, p)
    denom: np.ndarray  # w_d. or N_d
    xbar: np.ndarray  # Sx / denom
    c: np.ndarray
    w: np.ndarray
    offsets: np.ndarray
    calibrated: bool = False


def pseudo_stats(sample: UnitSample, kind: str) -> PseudoStats:
    st = sample.stacked
    cal = kind == "calibrated"
    if cal and st.w_cal is None:
        raise DataError("calibrated weights requested but absent (run the calibrate step first)")
    w = st.w_cal if cal else st.w
    WX = w[:, None] * st.X
    Sx = np.add.reduceat(WX, st.offsets[:-1], axis=0)
    denom = st.N if cal else np.add.reduceat(st.w, st.offsets[:-1])
    return PseudoStats(
        WX=WX, Swxx=st.X.T @ WX, Sx=Sx, denom=denom, xbar=Sx / denom[:, None],
        c=unit_structure_constants(sample, kind), w=w, offsets=st.offsets, calibrated=cal,
    )


def pseudo_beta_batch(gamma: np.ndarray, Y: np.ndarray, ps: PseudoStats) -> np.ndarray:
    """Batched pseudo-EBLUP beta; gamma (B, D), Y (B, n)."""
    Swy = np.add.reduceat(ps.w * Y, ps.offsets[:-1], axis=-1)  # (B, D)
    ybar = Swy / ps.denom
    M = ps.Swxx - np.einsum("bd,dp,dq->bpq", gamma, ps.Sx, ps.xbar)
    rhs = Y @ ps.WX - np.einsum("bd,dp,bd->bp", gamma, ps.xbar, Swy)
    return np.linalg.solve(M, rhs[..., None])[..., 0], ybar


def pseudo_beta_unit(sigma_u2: float, sigma_e2: float, sample: UnitSample, kind: str = "base") -> np.ndarray:
    """Survey-weighted unit-level estimator of beta for the pseudo-EBLUP.

    beta = [sum_d sum_i w x (x - g_d xbar_dw)']^-1 sum_d sum_i w (x - g_d xbar_dw) y,
    with g_d = sigma_u^2 / (sigma_u^2 + sigma_e^2 c_d) and xbar_dw the weighted
    area mean of x (normalised by N_d for calibrated weights).
    """
    ps = pseudo_stats(sample, kind)
    psi = sigma_e2 * ps.c
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(sigma_u2 + psi > 0, sigma_u2 / (sigma_u2 + psi), np.nan)
    if np.any(np.isnan(gamma)):
        raise ConfigError("degenerate shrinkage: sigma_u2 and psi_d both zero")
    M = ps.Swxx - np.einsum("d,dp,dq->pq", gamma, ps.Sx, ps.xbar)
    _check_design(M[None], "pseudo-EBLUP beta")
    beta, _ = pseudo_beta_batch(gamma[None], sample.stacked.y[None], ps)
    return beta[0]


# --------------------------------------------------------------------------
# likelihood kernels (batched)


def _gls_parts(w: np.ndarray, R: np.ndarray, X: np.ndarray):
    """For weights w (m, k, D) and responses R (m, D): A, X'Wr, r'Wr."""
    XXt = X.T[:, None, :] * X.T[None, :, :]  # (p, p, D)
    A = (w[..., None, None, :] * XXt).sum(-1)
    wr = w * R[:, None, :]
    b = (wr[..., None, :] * X.T).sum(-1)
    rr = (wr * R[:, None, :]).sum(-1)
    return A, b, rr


def _fh_loglik(s, R, psi, X):
    """REML log-likelihood of the FH model; s (m, k) values of sigma_u^2."""
    D, p = X.shape
    v = s[:, :, None] + psi[:, None, :]
    bad = np.any(v <= 0, axis=-1)
    v = np.where(v > 0, v, 1.0)
    A, b, rr = _gls_parts(1.0 / v, R, X)
    sign, logdet = np.linalg.slogdet(A)
    beta = np.linalg.solve(A, b[..., None])[..., 0]
    q = rr - (b * beta).sum(-1)
    ll = -0.5 * ((D - p) * LOG2PI + np.log(v).sum(-1) + logdet + q)
    return np.where(bad | (sign <= 0), -np.inf, ll), beta


def _fisher_polish(theta, R, X, comps, offset, steps=4):
    """Fisher scoring on the exact REML score for V = offset + theta @ comps.

    Golden section on likelihood values stalls near sqrt(machine eps) in x;
    a few scoring steps from the search result recover full precision.
    theta (m, k) must be interior; comps (k, D); offset (m, D).
    """
    theta = theta.copy()
    for _ in range(steps):
        V = offset + theta @ comps
        Vi = 1.0 / V
        G = Vi[:, :, None] * X[None]
        A = np.einsum("md,dp,dq->mpq", Vi, X, X)
        P = -G @ np.linalg.solve(A, np.swapaxes(G, 1, 2))
        idx = np.arange(X.shape[0])
        P[:, idx, idx] += Vi
        Py = np.einsum("mde,me->md", P, R)
        score = -0.5 * (np.einsum("md,kd->mk", P[:, idx, idx], comps) - np.einsum("md,kd->mk", Py**2, comps))
        info = 0.5 * np.einsum("kd,mde,le->mkl", comps, P**2, comps)
        with np.errstate(invalid="ignore", divide="ignore"):
            step = np.linalg.solve(info, score[..., None])[..., 0]
        new = theta + step
        ok = np.all(np.isfinite(new) & (new > 0), axis=1)
        theta[ok] = new[ok]
    return theta


def _polish_fh_rows(x, ll, R, psi, X, comps, rows):
    """Polish interior rows and keep a polished value only if its likelihood is no worse."""
    if rows.size == 0:
        return x, ll
    k = comps.shape[0]
    th = _fisher_polish(x[rows].reshape(-1, k), R[rows], X, comps, psi[rows])
    v = psi[rows] + th @ comps
    ll_new = _fh_loglik(np.zeros((rows.size, 1)), R[rows], v, X)[0][:, 0]
    keep = ll_new >= ll[rows] - 1e-12 * (1.0 + np.abs(ll[rows]))
    x = x.copy()
    ll = ll.copy()
    x[rows[keep]] = th[keep].reshape(x[rows[keep]].shape)
    ll[rows[keep]] = ll_new[keep]
    return x, ll


def _structured_profile(t, R, ctil, X):
    """Profiled REML of V_d = sigma^2 (t + (1 - t) ctil_d); returns (ll, beta, sigma^2)."""
    D, p = X.shape
    h = t[:, :, None] + (1.0 - t[:, :, None]) * ctil[None, None, :]
    A, b, rr = _gls_parts(1.0 / h, R, X)
    sign, logdet = np.linalg.slogdet(A)
    beta = np.linalg.solve(A, b[..., None])[..., 0]
    q = np.maximum(rr - (b * beta).sum(-1), 0.0)
    s2 = q / (D - p)
    with np.errstate(divide="ignore"):
        ll = -0.5 * ((D - p) * (LOG2PI + np.log(s2) + 1.0) + np.log(h).sum(-1) + logdet)
    return np.where(sign <= 0, -np.inf, ll), beta, s2


@dataclass(frozen=True)
class BHFDesign:
    """Response-free sufficient statistics of the nested-error design."""

    X: np.ndarray
    offsets: np.ndarray
    n_d: np.ndarray
    Sxx: np.ndarray
    S: np.ndarray  # per-area column sums of X, (D, p)
    ols: np.ndarray  # (X'X)^-1 X'

    @classmethod
    def from_sample(cls, sample: UnitSample) -> "BHFDesign":
        st = sample.stacked
        X = st.X
        Sxx = X.T @ X
        _check_design(Sxx[None], "unit-level design")
        return cls(
            X=X, offsets=st.offsets, n_d=sample.n_d.astype(float), Sxx=Sxx,
            S=np.add.reduceat(X, st.offsets[:-1], axis=0), ols=np.linalg.solve(Sxx, X.T),
        )


def _bhf_profile(rho, stats, des: BHFDesign):
    """Profiled REML of the nested-error model at ratio rho (m, k)."""
    T, Sxy, Syy = stats
    n, p = des.X.shape
    a = rho[:, :, None] / (1.0 + rho[:, :, None] * des.n_d)
    SSt = des.S.T[:, None, :] * des.S.T[None, :, :]
    XHX = des.Sxx - (a[..., None, None, :] * SSt).sum(-1)
    at = a * T[:, None, :]
    XHy = Sxy[:, None, :] - (at[..., None, :] * des.S.T).sum(-1)
    yHy = Syy[:, None] - (at * T[:, None, :]).sum(-1)
    sign, logdet = np.linalg.slogdet(XHX)
    beta = np.linalg.solve(XHX, XHy[..., None])[..., 0]
    q = np.maximum(yHy - (XHy * beta).sum(-1), 0.0)
    s2 = q / (n - p)
    with np.errstate(divide="ignore"):
        ll = -0.5 * ((n - p) * (LOG2PI + np.log(s2) + 1.0) + np.log1p(rho[:, :, None] * des.n_d).sum(-1) + logdet)
    return np.where(sign <= 0, -np.inf, ll), beta, s2


# --------------------------------------------------------------------------
# public log-likelihoods (single parameter points)


def reml_loglik_fh(sigma_u2: float, data: AreaDataset, psi) -> float:
    psi = np.asarray(psi, dtype=float)
    ll, _ = _fh_loglik(np.array([[sigma_u2]]), data.ybar[None], psi[None], data.Xbar)
    return float(ll[0, 0])


def reml_loglik_structured(sigma_u2: float, sigma_e2: float, data: AreaDataset, c) -> float:
    """REML log-likelihood with V_d = sigma_u^2 + sigma_e^2 c_d."""
    return reml_loglik_fh(sigma_u2, data, sigma_e2 * np.asarray(c, dtype=float))


def reml_loglik_bhf(sigma_u2: float, sigma_e2: float, sample: UnitSample) -> float:
    if sigma_e2 <= 0:
        return -np.inf
    des = BHFDesign.from_sample(sample)
    y = sample.stacked.y
    rho = sigma_u2 / sigma_e2
    stats = (np.add.reduceat(y, des.offsets[:-1])[None], (des.X.T @ y)[None], np.array([y @ y]))
    ll_prof, _, s2 = _bhf_profile(np.array([[rho]]), stats, des)
    # un-profile: replace sigma^2-hat by sigma_e2
    n, p = des.X.shape
    q = s2[0, 0] * (n - p)
    return float(ll_prof[0, 0] + 0.5 * (n - p) * (np.log(q / (n - p)) + 1.0)
                 - 0.5 * ((n - p) * np.log(sigma_e2) + q / sigma_e2))


# --------------------------------------------------------------------------
# batched fits


def _ols_residuals(Y, X):
    b0 = np.linalg.lstsq(X, Y.T, rcond=None)[0].T
    return Y - b0 @ X.T, b0


def _perfect(R, Y):
    return np.sum(R**2, axis=-1) <= 1e-24 * np.maximum(np.sum(Y**2, axis=-1), 1e-300)


def fit_fh_batch(Y: np.ndarray, Xbar: np.ndarray, psi: np.ndarray) -> FitBatch:
    """REML fits of the FH model for responses Y (B, D); psi is (D,) or (B, D)."""
    Y = np.atleast_2d(Y)
    B, D = Y.shape
    p = Xbar.shape[1]
    psi = np.broadcast_to(np.asarray(psi, dtype=float), (B, D))
    R, b0 = _ols_residuals(Y, Xbar)
    ub = UPPER_FACTOR * np.maximum(np.var(Y, axis=1, ddof=1), np.maximum(psi.mean(axis=1), 1e-12))
    grid = ub[:, None] * _FH_GRID[None, :]

    def f(s, rows):
        return _fh_loglik(s, R[rows], psi[rows], Xbar)[0]

    res = maximize_batched(f, grid, rtol=RTOL, atol=RTOL * 1e-2 * ub)
    x, _ = _polish_fh_rows(res.x, res.fx, R, psi, Xbar, np.ones((1, D)), np.flatnonzero(res.x > 0))
    ll, beta = _fh_loglik(x[:, None], R, psi, Xbar)
    return FitBatch(
        beta=b0 + beta[:, 0], sigma_u2=x, sigma_e2=None, loglik=ll[:, 0],
        iterations=res.iterations, converged=res.converged & np.isfinite(ll[:, 0]),
        u_at_zero=res.x == 0.0, e_at_zero=None,
    )


def fit_structured_batch(Y: np.ndarray, Xbar: np.ndarray, c: np.ndarray) -> FitBatch:
    """REML fits of the FH model with psi_d = sigma_e^2 c_d, responses Y (B, D)."""
    Y = np.atleast_2d(Y)
    B, D = Y.shape
    c = np.asarray(c, dtype=float)
    cbar = c.mean()
    ctil = c / cbar
    R, b0 = _ols_residuals(Y, Xbar)
    perfect = _perfect(R, Y)
    grid = np.broadcast_to(_T_GRID, (B, _T_GRID.size))
    live = np.flatnonzero(~perfect)

    t = np.zeros(B)
    iters = np.zeros(B, dtype=int)
    conv = np.ones(B, dtype=bool)
    if live.size:
        def f(tt, rows):
            return _structured_profile(tt, R[live[rows]], ctil, Xbar)[0]

        res = maximize_batched(f, grid[live], rtol=RTOL, atol=1e-14)
        t[live], iters[live], conv[live] = res.x, res.iterations, res.converged
    ll, beta, s2 = _structured_profile(t[:, None], R, ctil, Xbar)
    s2 = np.where(perfect, 0.0, s2[:, 0])
    su = s2 * t
    se = s2 * (1.0 - t) / cbar
    ll = ll[:, 0]
    inner = np.flatnonzero(~perfect & (su > 0) & (se > 0))
    if inner.size:
        th, ll = _polish_fh_rows(np.column_stack([su, se]), ll, R, np.zeros((B, D)), Xbar,
                                 np.vstack([np.ones(D), c]), inner)
        su, se = th[:, 0], th[:, 1]
        _, bp = _fh_loglik(np.zeros((inner.size, 1)), R[inner], su[inner, None] + se[inner, None] * c, Xbar)
        beta = beta.copy()
        beta[inner] = bp
    ll[perfect] = np.inf
    return FitBatch(
        beta=b0 + beta[:, 0], sigma_u2=su, sigma_e2=se, loglik=ll, iterations=iters,
        converged=conv & ~np.isnan(ll), u_at_zero=su == 0.0, e_at_zero=se == 0.0,
    )


def _bhf_stats(Y, des: BHFDesign):
    b0 = Y @ des.ols.T
    R = Y - b0 @ des.X.T
    T = np.add.reduceat(R, des.offsets[:-1], axis=-1)
    return R, b0, (T, R @ des.X, np.sum(R**2, axis=-1))


def fit_bhf_batch(Y: np.ndarray, des: BHFDesign) -> FitBatch:
    """REML fits of the nested-error model for stacked responses Y (B, n)."""
    Y = np.atleast_2d(Y)
    B = Y.shape[0]
    R, b0, stats = _bhf_stats(Y, des)
    perfect = _perfect(R, Y)
    live = np.flatnonzero(~perfect)
    rho = np.zeros(B)
    iters = np.zeros(B, dtype=int)
    conv = np.ones(B, dtype=bool)
    if live.size:
        sub = tuple(s[live] for s in stats)

        def f(r, rows):
            return _bhf_profile(r, tuple(s[rows] for s in sub), des)[0]

        grid = np.broadcast_to(_RHO_GRID, (live.size, _RHO_GRID.size))
        res = maximize_batched(f, grid, rtol=RTOL, atol=1e-14)
        rho[live], iters[live], conv[live] = res.x, res.iterations, res.converged
    ll, beta, s2 = _bhf_profile(rho[:, None], stats, des)
    se = np.where(perfect, 0.0, s2[:, 0])
    su = rho * se
    ll = ll[:, 0]
    ll[perfect] = np.inf
    return FitBatch(
        beta=b0 + beta[:, 0], sigma_u2=su, sigma_e2=se, loglik=ll, iterations=iters,
        converged=conv & ~np.isnan(ll), u_at_zero=su == 0.0, e_at_zero=se == 0.0,
    )


# --------------------------------------------------------------------------
# single fits


def _boundary(fb: FitBatch, i: int = 0) -> tuple[str, ...]:
    out = []
    if fb.u_at_zero[i]:
        out.append("sigma_u2")
    if fb.e_at_zero is not None and fb.e_at_zero[i]:
        out.append("sigma_e2")
    return tuple(out)


def _raise_unconverged(fb: FitBatch, what: str):
    if not fb.converged[0]:
        raise ConvergenceError(
            f"{what}: search did not converge after {fb.iterations[0]} iterations "
            f"(sigma_u2={fb.sigma_u2[0]!r}, loglik={fb.loglik[0]!r})"
        )


def fit_reml_fh(data: AreaDataset, psi=None) -> VarComponentFit:
    """REML fit of the FH model with known error variances (default: data.psi0)."""
    psi = data.psi0 if psi is None else np.asarray(psi, dtype=float)
    D, p = data.D, data.p
    if D <= p:
        raise DataError(f"FH fit needs more areas than covariates (D={D}, p={p})")
    if np.any(~np.isfinite(psi)) or np.any(psi < 0):
        raise DataError("FH fit needs finite, non-negative psi_d for every area")
    fb = fit_fh_batch(data.ybar[None], data.Xbar, psi)
    _raise_unconverged(fb, "REML (FH)")
    fit = VarComponentFit(
        beta=fb.beta[0], sigma_u2=float(fb.sigma_u2[0]), sigma_e2=None, psi=psi.copy(),
        method="reml-fh", loglik_restricted=float(fb.loglik[0]), converged=True,
        iterations=int(fb.iterations[0]), boundary=_boundary(fb), max_leverage=float(leverages(data.Xbar).max()),
    )
    _warn_zero(fit)
    return fit


def fit_reml_structured_area(data: AreaDataset, c) -> VarComponentFit:
    """REML fit of sigma_u^2, sigma_e^2 and beta from area aggregates, psi_d = sigma_e^2 c_d."""
    if isinstance(c, StructureConstants):
        c = c.c
    c = np.asarray(c, dtype=float)
    D, p = data.D, data.p
    if D < 3 or D <= p:
        raise DataError(f"structured FH fit needs D >= 3 and D > p (D={D}, p={p})")
    if np.any(c <= 0):
        raise DataError("structure constants c_d must be positive")
    if np.ptp(c) <= 1e-12 * c.max():
        raise IdentificationError(
            "sigma_u2 and sigma_e2 not separately identified from area data (all c_d equal)"
        )
    fb = fit_structured_batch(data.ybar[None], data.Xbar, c)
    _raise_unconverged(fb, "REML (structured FH)")
    se = float(fb.sigma_e2[0])
    fit = VarComponentFit(
        beta=fb.beta[0], sigma_u2=float(fb.sigma_u2[0]), sigma_e2=se, psi=se * c,
        method="reml-structured-area", loglik_restricted=float(fb.loglik[0]), converged=True,
        iterations=int(fb.iterations[0]), boundary=_boundary(fb), max_leverage=float(leverages(data.Xbar).max()),
    )
    _warn_zero(fit)
    return fit


def fit_reml_bhf(sample: UnitSample) -> VarComponentFit:
    """REML fit of the nested-error model on the unweighted unit data."""
    n, p, D = sample.n, sample.p, sample.D
    if D < 2 or n <= p:
        raise DataError(f"nested-error fit needs >= 2 areas and n > p (D={D}, n={n}, p={p})")
    des = BHFDesign.from_sample(sample)
    fb = fit_bhf_batch(sample.stacked.y[None], des)
    _raise_unconverged(fb, "REML (nested error)")
    se = float(fb.sigma_e2[0])
    fit = VarComponentFit(
        beta=fb.beta[0], sigma_u2=float(fb.sigma_u2[0]), sigma_e2=se, psi=se / sample.n_d,
        method="reml-bhf", loglik_restricted=float(fb.loglik[0]), converged=True,
        iterations=int(fb.iterations[0]), boundary=_boundary(fb),
    )
    _warn_zero(fit)
    return fit


def _warn_zero(fit: VarComponentFit):
    if fit.sigma_u2 == 0.0:
        msg = "sigma_u2 estimated at 0: shrinkage factors are 0 and predictors are purely synthetic"
        fit.notes.append(msg)
        warnings.warn(msg, stacklevel=3)


def fh_moments_sigma_u2(data: AreaDataset, psi) -> float:
    """Closed-form moment estimator of sigma_u^2 for the FH model.

    max(0, [RSS_ols - sum psi_d (1 - h_dd)] / (D - p)); a fallback for
    situations where a likelihood fit is not wanted.
    """
    psi = np.asarray(psi, dtype=float)
    X = data.Xbar
    beta, *_ = np.linalg.lstsq(X, data.ybar, rcond=None)
    rss = np.sum((data.ybar - X @ beta) ** 2)
    h = leverages(X)
    return max(0.0, float((rss - np.sum(psi * (1.0 - h))) / (data.D - data.p)))
