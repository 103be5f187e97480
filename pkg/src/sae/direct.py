"""Direct estimators of area means and their design variances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import AreaUnits, UnitSample
from .errors import ConfigError, DataError

KINDS = ("base", "calibrated")
DESIGNS = ("srswor", "general", "greg")


@dataclass(frozen=True)
class DirectEstimates:
    area_id: list[str]
    mu_dir: np.ndarray
    psi0: np.ndarray  # NaN where undefined (n_d = 1)
    kind: str
    design: str


def _check_kind(kind):
    if kind not in KINDS:
        raise ConfigError(f"unknown weight kind {kind!r}; expected one of {KINDS}")


def direct_mean(area: AreaUnits, kind: str = "base") -> float:
    """Weighted mean: Hajek form for base weights, N_d^-1 sum w_cal y for calibrated."""
    _check_kind(kind)
    w = area.weights(kind == "calibrated")
    denom = area.N if kind == "calibrated" else w.sum()
    return float(w @ area.y / denom)


def direct_variance(area: AreaUnits, kind: str = "base", design: str = "general") -> float:
    """Design variance estimate psi_d0 of the direct mean.

    srswor
        (1 - n/N) s^2 / n with s^2 the sample variance of y.
    general
        c^-2 (1 - n/N) n/(n-1) sum w_i^2 (y_i - ybar_w)^2, where c is N_d for
        calibrated weights and the weight sum for base weights.
    greg
        As ``general`` but with residuals of the area's survey-weighted
        regression of y on x (base weights). With an intercept-only x this
        coincides with ``general``; with n_d <= p the residuals vanish.
    """
    _check_kind(kind)
    if design not in DESIGNS:
        raise ConfigError(f"unknown variance design {design!r}; expected one of {DESIGNS}")
    n, N = area.n, area.N
    if n < 2:
        raise DataError(f"area {area.area_id}: direct variance undefined for n_d=1")
    fpc = 1.0 - n / N
    if design == "srswor":
        return float(fpc * np.var(area.y, ddof=1) / n)
    w = area.weights(kind == "calibrated")
    c = N if kind == "calibrated" else w.sum()
    if design == "general":
        resid = area.y - direct_mean(area, kind)
    elif n <= np.linalg.matrix_rank(area.X):
        return 0.0
    else:
        sw = np.sqrt(area.w)
        B, *_ = np.linalg.lstsq(sw[:, None] * area.X, sw * area.y, rcond=None)
        resid = area.y - area.X @ B
    return float(fpc * n / (n - 1) * np.sum(w**2 * resid**2) / c**2)


def direct_estimates(sample: UnitSample, kind: str = "base", design: str = "general") -> DirectEstimates:
    mu = np.array([direct_mean(a, kind) for a in sample.areas])
    psi0 = np.array([direct_variance(a, kind, design) if a.n > 1 else np.nan for a in sample.areas])
    return DirectEstimates(sample.area_ids, mu, psi0, kind, design)


def psi0_batch(sample: UnitSample, Y: np.ndarray, kind: str = "base", design: str = "general") -> np.ndarray:
    """``direct_variance`` for many stacked response vectors Y (B, n) at once.

    The sample design and weights are fixed; returns (B, D) with NaN for
    areas with n_d = 1. Areas whose regression residuals vanish identically
    (greg with n_d <= p) get an exact zero.
    """
    _check_kind(kind)
    if design not in DESIGNS:
        raise ConfigError(f"unknown variance design {design!r}; expected one of {DESIGNS}")
    Y = np.atleast_2d(Y)
    off = sample.stacked.offsets
    out = np.full((Y.shape[0], sample.D), np.nan)
    for d, a in enumerate(sample.areas):
        n, N = a.n, a.N
        if n < 2:
            continue
        Yd = Y[:, off[d]:off[d + 1]]
        fpc = 1.0 - n / N
        if design == "srswor":
            out[:, d] = fpc * np.var(Yd, axis=1, ddof=1) / n
            continue
        w = a.weights(kind == "calibrated")
        c = N if kind == "calibrated" else w.sum()
        if design == "general":
            R = Yd - (Yd @ w / c)[:, None]
        elif n <= np.linalg.matrix_rank(a.X):
            out[:, d] = 0.0
            continue
        else:
            sw = np.sqrt(a.w)
            H = a.X @ np.linalg.pinv(sw[:, None] * a.X) * sw  # weighted hat matrix
            R = Yd - Yd @ H.T
        out[:, d] = fpc * n / (n - 1) * (R**2 @ w**2) / c**2
    return out
