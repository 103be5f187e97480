"""Point predictors of area means.

Every model-based predictor here has the composite form
gamma_d * direct_part + (1 - gamma_d) * synthetic_part, and the
EstimateSet keeps both parts so the decomposition can be checked.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import AreaDataset, UnitSample, weighted_means
from .errors import ConfigError, DataError
from .varcomp import (
    PseudoStats, VarComponentFit, pseudo_beta_batch, pseudo_beta_unit, structure_constants,
    unit_structure_constants,
)

ESTIMATORS = ("DIR", "FHD", "FHA", "UA", "U", "YR")
AREA_FLAVORS = ("FHD", "FHA", "UA")
UNIT_FLAVORS = ("YR", "U")


@dataclass(frozen=True)
class EstimateSet:
    """Per-area predictions. Excluded areas carry NaN in every numeric field."""

    area_id: list[str]
    estimator: str
    mu_hat: np.ndarray
    gamma: np.ndarray
    direct_part: np.ndarray
    synthetic_part: np.ndarray
    method: str = ""
    excluded: np.ndarray | None = None

    def rows(self):
        for d, a in enumerate(self.area_id):
            yield a, self.mu_hat[d], self.gamma[d], self.direct_part[d], self.synthetic_part[d]


def gamma_shrinkage(sigma_u2, psi):
    """gamma = sigma_u^2 / (sigma_u^2 + psi); broadcasts."""
    su = np.asarray(sigma_u2, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if np.any(su < 0) or np.any(psi < 0):
        raise ConfigError("variances must be non-negative")
    tot = su + psi
    if np.any(tot == 0):
        raise ConfigError("degenerate shrinkage: sigma_u2 and psi_d both zero")
    g = su / tot
    return float(g) if g.ndim == 0 else g


def structured_psi(sigma_e2: float, weights, kind: str, size: float | None = None) -> float:
    """psi_d(sigma_e^2) from one area's weights.

    kind="base": sigma_e^2 sum w^2 / (sum w)^2, or with ``size`` given, sum w^2 / size^2.
    kind="calibrated": sigma_e^2 sum w^2 / N_d^2 with ``size`` = N_d.
    """
    w = np.asarray(weights, dtype=float)
    if kind == "calibrated":
        if size is None:
            raise ConfigError("calibrated structure needs N_d")
        denom = size
    elif kind == "base":
        denom = w.sum() if size is None else size
    else:
        raise ConfigError(f"unknown weight kind {kind!r}")
    return float(sigma_e2 * np.sum(w**2) / denom**2)


def _compose(ids, est, gamma, direct, synth, method="", excluded=None) -> EstimateSet:
    mu = gamma * direct + (1.0 - gamma) * synth
    return EstimateSet(list(ids), est, mu, gamma, direct, synth, method, excluded)


def direct_predictor(data: AreaDataset) -> EstimateSet:
    D = data.D
    nan = np.full(D, np.nan)
    return EstimateSet(list(data.area_id), "DIR", data.ybar.copy(), np.ones(D), data.ybar.copy(), nan,
                       f"direct-{data.kind}")


def area_predictor(fit: VarComponentFit, data: AreaDataset, flavor: str) -> EstimateSet:
    """FH-type predictor from an area-level fit.

    FHD needs a ``reml-fh`` fit on the areas that have psi0; areas without
    psi0 are excluded (NaN). FHA and UA need a ``reml-structured-area`` fit;
    UA is for calibrated aggregates, FHA for base-weight aggregates.
    """
    flavor = flavor.upper()
    if flavor not in AREA_FLAVORS:
        raise ConfigError(f"unknown area-level flavor {flavor!r}")
    if flavor == "FHD":
        if fit.method != "reml-fh":
            raise ConfigError("FHD requires a fit of the FH model with known psi (reml-fh)")
        keep = data.has_psi0
        if not keep.any():
            raise DataError("FHD needs psi0 for at least some areas")
        psi = np.full(data.D, np.nan)
        if fit.psi.size == data.D:
            psi[keep] = fit.psi[keep]
        elif fit.psi.size == keep.sum():
            psi[keep] = fit.psi
        else:
            raise ConfigError("fit psi does not match the area dataset")
    else:
        if fit.method != "reml-structured-area":
            raise ConfigError(f"{flavor} requires a structured area-level fit (reml-structured-area)")
        if flavor == "UA" and data.kind == "base":
            raise ConfigError("UA needs direct estimates from calibrated weights")
        if flavor == "FHA" and data.kind == "calibrated":
            raise ConfigError("FHA needs direct estimates from base weights")
        if fit.psi.size != data.D:
            raise ConfigError("fit psi does not match the area dataset")
        keep = np.ones(data.D, dtype=bool)
        psi = fit.psi
    synth = data.Xbar @ fit.beta
    gamma = np.full(data.D, np.nan)
    gamma[keep] = gamma_shrinkage(fit.sigma_u2, psi[keep])
    direct = np.where(keep, data.ybar, np.nan)
    synth = np.where(keep, synth, np.nan)
    return _compose(data.area_id, flavor, gamma, direct, synth, fit.method, ~keep)


def warn_negative_weights(sample: UnitSample) -> int:
    neg = sum(int(np.sum(a.w_cal <= 0)) for a in sample.areas if a.w_cal is not None)
    if neg:
        warnings.warn(
            f"{neg} non-positive calibrated weight(s): design consistency of the unified predictor is not guaranteed",
            stacklevel=3,
        )
    return neg


def unit_predictor(fit: VarComponentFit, sample: UnitSample, data: AreaDataset | None, flavor: str,
                   beta: np.ndarray | None = None) -> EstimateSet:
    """Pseudo-EBLUP (YR, base weights) or unified predictor (U, calibrated weights).

    Variance components come from ``fit`` (a nested-error fit); beta is the
    survey-weighted pseudo estimator evaluated at them unless given. The
    population means X_d come from ``data``; for U they may be omitted, in
    which case the calibrated weighted means of x (equal to X_d) are used.
    """
    flavor = flavor.upper()
    if flavor not in UNIT_FLAVORS:
        raise ConfigError(f"unknown unit-level flavor {flavor!r}")
    if fit.sigma_e2 is None:
        raise ConfigError("unit-level predictors need a fit with sigma_e2")
    cal = flavor == "U"
    if cal:
        if not sample.has_calibrated:
            raise DataError("estimator U needs calibrated weights (run the calibrate step first)")
        warn_negative_weights(sample)
    kind = "calibrated" if cal else "base"
    if beta is None:
        beta = pseudo_beta_unit(fit.sigma_u2, fit.sigma_e2, sample, kind)
    ybar, xbar = weighted_means(sample, cal)
    if data is None:
        if not cal:
            raise DataError("YR needs population covariate means")
        Xbar = xbar
    else:
        if data.area_id != sample.area_ids:
            raise DataError("area dataset and unit sample cover different areas")
        Xbar = data.Xbar
    c = unit_structure_constants(sample, kind)
    gamma = gamma_shrinkage(fit.sigma_u2, fit.sigma_e2 * c)
    synth = Xbar @ beta
    # calibrated weights give xbar_w = Xbar, so the U direct part is ybar itself
    direct = ybar if cal else ybar + (Xbar - xbar) @ beta
    return _compose(sample.area_ids, flavor, np.atleast_1d(gamma), direct, synth, fit.method)


def benchmark_residual(est: EstimateSet, sample: UnitSample) -> float:
    """sum_d N_d mu_d - sum_d sum_i w_cal y."""
    if not sample.has_calibrated:
        raise DataError("benchmarking needs calibrated weights (run the calibrate step first)")
    total = sum(float(a.w_cal @ a.y) for a in sample.areas)
    return float(np.sum(sample.N * est.mu_hat) - total)


@dataclass(frozen=True)
class ConsistencyReport:
    area_id: list[str]
    min_weight: np.ndarray
    max_ratio: np.ndarray
    sum_sq_ratio: np.ndarray
    negative: np.ndarray

    def rows(self):
        for d, a in enumerate(self.area_id):
            yield a, self.min_weight[d], self.max_ratio[d], self.sum_sq_ratio[d], int(self.negative[d])


def consistency_diagnostic(sample: UnitSample) -> ConsistencyReport:
    """Per-area summaries of w_cal / N_d bearing on design consistency of U."""
    if not sample.has_calibrated:
        raise DataError("consistency diagnostic needs calibrated weights (run the calibrate step first)")
    mins, mx, ss, neg = [], [], [], []
    for a in sample.areas:
        r = a.w_cal / a.N
        mins.append(a.w_cal.min())
        mx.append(r.max())
        ss.append(np.sum(r**2))
        neg.append(np.sum(a.w_cal <= 0))
    return ConsistencyReport(sample.area_ids, np.array(mins), np.array(mx), np.array(ss), np.array(neg))


# --------------------------------------------------------------------------
# batched helpers used by the bootstrap and the simulation harness


def shrink_batch(sigma_u2: np.ndarray, psi: np.ndarray, direct: np.ndarray, synth: np.ndarray) -> np.ndarray:
    """Composite predictor for a batch; sigma_u2 (B,), psi/direct/synth (B, D) or (D,)."""
    su = np.asarray(sigma_u2, dtype=float)[:, None]
    tot = su + psi
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(tot > 0, su / np.where(tot > 0, tot, 1.0), np.nan)
    return g * direct + (1.0 - g) * synth


def area_structure(data: AreaDataset, flavor: str) -> np.ndarray:
    """Structure constants matching a structured flavor (UA: calibrated, FHA: base)."""
    return structure_constants(data, "calibrated" if flavor.upper() == "UA" else "base").c


def unit_predictor_batch(sigma_u2: np.ndarray, sigma_e2: np.ndarray, Y: np.ndarray, ps: PseudoStats,
                         Xbar: np.ndarray) -> np.ndarray:
    """YR / U predictions for stacked responses Y (B, n) and per-row variance components."""
    su = np.asarray(sigma_u2, dtype=float)[:, None]
    psi = np.asarray(sigma_e2, dtype=float)[:, None] * ps.c
    tot = su + psi
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(tot > 0, su / np.where(tot > 0, tot, 1.0), np.nan)
    # rows with both components at zero: any gamma gives the same exact fit
    g = np.where(np.isnan(g), 0.0, g)
    beta, ybar = pseudo_beta_batch(g, Y, ps)
    synth = beta @ Xbar.T
    if ps.calibrated:
        direct = ybar
    else:
        direct = ybar + synth - (beta[:, None, :] * ps.xbar[None]).sum(-1)
    return g * direct + (1.0 - g) * synth
