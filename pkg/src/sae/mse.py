"""MSE estimation: the Prasad-Rao analytical estimator and parametric bootstraps.

Bootstrap replicate b draws from its own generator seeded with
SeedSequence(key + [b]), where ``key`` is the master seed (or a tuple such as
(seed, l) when called from the simulation harness). Replicates are processed
in fixed-size chunks whatever the number of workers and the per-replicate
errors are reduced in replicate order, so results do not depend on the
worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import AreaDataset, UnitSample
from .errors import ConfigError, ConvergenceError, DataError
from .predictors import shrink_batch, unit_predictor_batch
from .varcomp import (
    BHFDesign, VarComponentFit, fit_bhf_batch, fit_fh_batch, fit_reml_fh, fit_reml_structured_area,
    fit_structured_batch, pseudo_beta_unit, pseudo_stats, structure_constants,
)

CHUNK = 50
B_MIN = 50
MAX_FAIL = 0.05


@dataclass
class MseReport:
    """Per-area MSE estimates by one method; NaN marks excluded areas."""

    area_id: list[str]
    estimator: str
    method: str
    mse: np.ndarray
    g1: np.ndarray | None = None
    g2: np.ndarray | None = None
    g3: np.ndarray | None = None
    mc_se: np.ndarray | None = None  # Monte Carlo standard error of a bootstrap mean
    B: int = 0
    seed: object = None
    failed: int = 0
    boundary: bool = False

    def rows(self):
        for d, a in enumerate(self.area_id):
            r = [a, self.estimator, self.method, self.mse[d]]
            if self.g1 is not None:
                r += [self.g1[d], self.g2[d], self.g3[d]]
            yield r


def _seed_key(master_seed) -> list[int]:
    if isinstance(master_seed, (int, np.integer)):
        return [int(master_seed)]
    return [int(s) for s in master_seed]


def replicate_rng(key: Sequence[int], b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key) + [int(b)]))


# --------------------------------------------------------------------------
# Prasad-Rao


def pr_terms(sigma_u2, psi, Xbar):
    """Prasad-Rao terms for a batch: sigma_u2 (B,), psi (B, D) or (D,); returns (g1, g2, g3)."""
    su = np.atleast_1d(np.asarray(sigma_u2, dtype=float))[:, None]
    psi = np.broadcast_to(np.asarray(psi, dtype=float), (su.shape[0], Xbar.shape[0]))
    v = su + psi
    if np.any(v <= 0):
        raise DataError("Prasad-Rao MSE needs sigma_u2 + psi_d > 0 in every area")
    gamma = su / v
    g1 = gamma * psi
    A = np.einsum("bd,dp,dq->bpq", 1.0 / v, Xbar, Xbar)
    Ainv = np.linalg.inv(A)
    q = np.einsum("dp,bpq,dq->bd", Xbar, Ainv, Xbar)
    g2 = (1.0 - gamma) ** 2 * q
    vbar = 2.0 / np.sum(v**-2, axis=1, keepdims=True)
    g3 = (1.0 - gamma) ** 2 * vbar / v
    return g1, g2, g3


def mse_prasad_rao(fit: VarComponentFit, psi, data: AreaDataset, estimator: str = "FHD") -> MseReport:
    """g1 + g2 + 2 g3 evaluated at the fitted sigma_u^2."""
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (data.D,):
        raise DataError("psi must have one entry per area")
    g1, g2, g3 = (t[0] for t in pr_terms(fit.sigma_u2, psi, data.Xbar))
    return MseReport(list(data.area_id), estimator, "PR", g1 + g2 + 2.0 * g3, g1, g2, g3,
                     boundary=fit.sigma_u2 == 0.0)


# --------------------------------------------------------------------------
# chunked execution


def _chunks(B: int) -> list[tuple[int, int]]:
    return [(s, min(s + CHUNK, B)) for s in range(0, B, CHUNK)]


def _run(fn, ctx: dict, B: int, workers: int):
    tasks = _chunks(B)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(fn, [ctx] * len(tasks), tasks))
    else:
        parts = [fn(ctx, t) for t in tasks]
    return [np.concatenate([p[k] for p in parts]) for k in range(len(parts[0]))]


def _reduce(err2: np.ndarray, ok: np.ndarray, B: int, what: str):
    failed = int(B - ok.sum())
    if failed > MAX_FAIL * B:
        raise ConvergenceError(f"{what}: {failed} of {B} bootstrap replicates failed (more than 5%)")
    e = err2[ok]
    mse = e.mean(axis=0)
    se = e.std(axis=0, ddof=1) / np.sqrt(e.shape[0]) if e.shape[0] > 1 else np.full(e.shape[1], np.nan)
    return mse, se, failed


def _check_B(B):
    if B < B_MIN:
        raise ConfigError(f"bootstrap needs B >= {B_MIN} (got {B})")


# --------------------------------------------------------------------------
# unit-level bootstrap (YR, U)


def _unit_chunk(ctx, span):
    b0, b1 = span
    key, D, n = ctx["key"], ctx["D"], ctx["n"]
    su, se = ctx["sigma_u2"], ctx["sigma_e2"]
    U = np.empty((b1 - b0, D))
    E = np.empty((b1 - b0, n))
    for i, b in enumerate(range(b0, b1)):
        rng = replicate_rng(key, b)
        U[i] = rng.standard_normal(D)
        E[i] = rng.standard_normal(n)
    U *= np.sqrt(su)
    E *= np.sqrt(se)
    des = ctx["design"]
    Y = ctx["xb"] + U[:, ctx["area"]] + E
    mu = ctx["Xb"] + U
    fb = fit_bhf_batch(Y, des)
    pred = unit_predictor_batch(fb.sigma_u2, fb.sigma_e2, Y, ctx["ps"], ctx["Xbar"])
    ok = fb.converged & np.all(np.isfinite(pred), axis=1)
    return (pred - mu) ** 2, ok


def bootstrap_mse_unit(fit: VarComponentFit, sample: UnitSample, data: AreaDataset | None, flavor: str,
                       B: int = 500, master_seed=0, workers: int = 1) -> MseReport:
    """Parametric bootstrap MSE of the YR or U predictor under the nested-error model.

    Data are generated from the fitted variance components with beta set to
    the flavor's survey-weighted pseudo estimator at those components; every
    replicate refits the nested-error model by REML and recomputes the
    predictor. Covariates, sample and weights stay fixed.
    """
    flavor = flavor.upper()
    if flavor not in ("YR", "U"):
        raise ConfigError(f"unit bootstrap supports YR and U, not {flavor}")
    if fit.sigma_e2 is None:
        raise ConfigError("unit bootstrap needs a nested-error fit")
    _check_B(B)
    kind = "calibrated" if flavor == "U" else "base"
    if kind == "calibrated" and not sample.has_calibrated:
        raise DataError("estimator U needs calibrated weights (run the calibrate step first)")
    ps = pseudo_stats(sample, kind)
    if data is None:
        if kind != "calibrated":
            raise DataError("YR needs population covariate means")
        Xbar = ps.xbar
    else:
        Xbar = data.Xbar
    if fit.sigma_u2 + fit.sigma_e2 > 0:
        beta = pseudo_beta_unit(fit.sigma_u2, fit.sigma_e2, sample, kind)
    else:
        beta = fit.beta
    st = sample.stacked
    ctx = dict(
        key=_seed_key(master_seed), D=sample.D, n=sample.n, sigma_u2=fit.sigma_u2, sigma_e2=fit.sigma_e2,
        design=BHFDesign.from_sample(sample), ps=ps, Xbar=Xbar, area=st.area,
        xb=st.X @ beta, Xb=Xbar @ beta,
    )
    err2, ok = _run(_unit_chunk, ctx, B, workers)
    mse, se, failed = _reduce(err2, ok, B, f"bootstrap ({flavor})")
    return MseReport(sample.area_ids, flavor, "PB", mse, mc_se=se, B=B, seed=master_seed, failed=failed)


# --------------------------------------------------------------------------
# area-level bootstrap (FHD, UA, FHA)


def _area_chunk(ctx, span):
    b0, b1 = span
    key, D = ctx["key"], ctx["D"]
    Z = np.empty((b1 - b0, 2, D))
    for i, b in enumerate(range(b0, b1)):
        Z[i] = replicate_rng(key, b).standard_normal((2, D))
    u = Z[:, 0] * np.sqrt(ctx["sigma_u2"])
    e = Z[:, 1] * np.sqrt(ctx["psi_hat"])
    mu = ctx["Xb"] + u
    Y = mu + e
    Xbar = ctx["Xbar"]
    if ctx["target"] == "FHD":
        fb = fit_fh_batch(Y, Xbar, ctx["psi0"])
        pred = shrink_batch(fb.sigma_u2, ctx["psi0"], Y, fb.beta @ Xbar.T)
    else:
        fb = fit_structured_batch(Y, Xbar, ctx["c"])
        pred = shrink_batch(fb.sigma_u2, fb.sigma_e2[:, None] * ctx["c"], Y, fb.beta @ Xbar.T)
    ft = fit_fh_batch(Y, Xbar, ctx["psi_hat"])
    pred_t = shrink_batch(ft.sigma_u2, ctx["psi_hat"], Y, ft.beta @ Xbar.T)
    ok = fb.converged & ft.converged & np.all(np.isfinite(pred), axis=1) & np.all(np.isfinite(pred_t), axis=1)
    return (pred - mu) ** 2, (pred_t - mu) ** 2, ok


def default_structure(data: AreaDataset) -> np.ndarray:
    return structure_constants(data, "calibrated" if data.kind == "calibrated" else "base").c


def bootstrap_mse_area(fit: VarComponentFit, data: AreaDataset, target: str, B: int = 500, master_seed=0,
                       c: np.ndarray | None = None, workers: int = 1) -> dict[str, MseReport]:
    """Area-level parametric bootstrap; returns reports keyed PB1, PBT, PB2 (and PR).

    ``fit`` supplies the generating beta, sigma_u^2 and sigma_e^2 (a structured
    area-level fit or a nested-error fit). Errors are drawn with variances
    psi_hat_d = sigma_e^2 c_d, where c defaults to the structure matching the
    weights that produced ``data``. Per replicate the target predictor is
    recomputed (FHD: FH refit with psi0 held fixed; UA/FHA: structured refit)
    together with FHT (FH refit with psi_hat as known). PB2 adds
    max(0, PB1 - PBT) to the Prasad-Rao estimate computed once on the
    original data. Areas without psi0 are left out of the FHD target.
    """
    target = target.upper()
    if target not in ("FHD", "UA", "FHA"):
        raise ConfigError(f"area bootstrap supports FHD, UA and FHA, not {target}")
    if fit.sigma_e2 is None:
        raise ConfigError("area bootstrap needs a fit that estimates sigma_e2 (structured or nested-error)")
    _check_B(B)
    if target == "UA" and data.kind == "base":
        raise ConfigError("UA needs direct estimates from calibrated weights")
    c_full = default_structure(data) if c is None else np.asarray(c, dtype=float)
    keep = data.has_psi0 if target == "FHD" else np.ones(data.D, dtype=bool)
    if target == "FHD" and not keep.any():
        raise DataError("FHD needs psi0 for at least some areas")
    sub = data.subset(keep)
    cs = c_full[keep]
    psi_hat = fit.sigma_e2 * cs
    if target == "FHD":
        orig = fit_reml_fh(sub, sub.psi0)
        pr_psi = sub.psi0
    else:
        orig = fit_reml_structured_area(sub, cs)
        pr_psi = orig.psi
    pr = mse_prasad_rao(orig, pr_psi, sub, target)
    ctx = dict(
        key=_seed_key(master_seed), D=sub.D, sigma_u2=fit.sigma_u2, psi_hat=psi_hat, Xbar=sub.Xbar,
        Xb=sub.Xbar @ fit.beta, target=target, psi0=sub.psi0, c=cs,
    )
    err1, errt, ok = _run(_area_chunk, ctx, B, workers)
    pb1, se1, failed = _reduce(err1, ok, B, f"bootstrap ({target})")
    pbt, set_, _ = _reduce(errt, ok, B, f"bootstrap ({target})")
    pb2 = pr.mse + np.maximum(0.0, pb1 - pbt)

    def full(v):
        out = np.full(data.D, np.nan)
        out[keep] = v
        return out

    ids = list(data.area_id)
    common = dict(B=B, seed=master_seed, failed=failed)
    return {
        "PR": MseReport(ids, target, "PR", full(pr.mse), full(pr.g1), full(pr.g2), full(pr.g3),
                        boundary=pr.boundary),
        "PB1": MseReport(ids, target, "PB1", full(pb1), mc_se=full(se1), **common),
        "PBT": MseReport(ids, target, "PBT", full(pbt), mc_se=full(set_), **common),
        "PB2": MseReport(ids, target, "PB2", full(pb2), **common),
    }
