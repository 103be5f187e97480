"""Unit-level residual checks for a nested-error fit: residuals, predicted
area effects, histogram counts and normal quantile pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import UnitSample
from .errors import ConfigError
from .varcomp import VarComponentFit


@dataclass(frozen=True)
class ResidualReport:
    area_id: list[str]
    unit_area: np.ndarray  # area index of each residual
    residuals: np.ndarray
    u_hat: np.ndarray
    gamma: np.ndarray
    bin_edges: np.ndarray
    bin_counts: np.ndarray
    qq_theoretical: np.ndarray
    qq_empirical: np.ndarray


def qq_pairs(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standard normal quantiles at plotting positions (i - 0.5)/n against the sorted sample."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    return norm.ppf((np.arange(1, n + 1) - 0.5) / n), x


def residual_diagnostics(fit: VarComponentFit, sample: UnitSample, bins: int | None = None) -> ResidualReport:
    """e_di = y_di - x_di'beta - u_d with u_d = gamma_d (ybar_d - xbar_d'beta),
    gamma_d = sigma_u^2 / (sigma_u^2 + sigma_e^2 / n_d), using unweighted area means."""
    if fit.sigma_e2 is None:
        raise ConfigError("residual diagnostics need a nested-error fit")
    st = sample.stacked
    n_d = sample.n_d.astype(float)
    tot = fit.sigma_u2 + fit.sigma_e2 / n_d
    gamma = np.where(tot > 0, fit.sigma_u2 / np.where(tot > 0, tot, 1.0), 0.0)
    r = st.y - st.X @ fit.beta
    u = gamma * st.area_sum(r) / n_d
    e = r - u[st.area]
    k = int(np.ceil(np.sqrt(e.size))) if bins is None else int(bins)
    if k < 1:
        raise ConfigError("number of bins must be positive")
    lo, hi = e.min(), e.max()
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, edges = np.histogram(e, bins=k, range=(lo, hi))
    theo, emp = qq_pairs(e)
    return ResidualReport(sample.area_ids, st.area, e, u, gamma, edges, counts, theo, emp)
