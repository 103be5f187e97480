"""Linear (chi-squared distance) calibration of area survey weights and GREG totals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import UnitSample
from .errors import CalibrationError, DataError

COND_MAX = 1e12


@dataclass(frozen=True)
class CalibratedWeights:
    w_cal: np.ndarray
    lagrange: np.ndarray
    constraint_residual: float
    negative_count: int


@dataclass(frozen=True)
class CalibrationResult:
    sample: UnitSample
    areas: list[CalibratedWeights]

    @property
    def w_cal(self) -> list[np.ndarray]:
        return [a.w_cal for a in self.areas]

    @property
    def lagrange(self) -> np.ndarray:
        return np.array([a.lagrange for a in self.areas])

    @property
    def constraint_residual(self) -> float:
        return max(a.constraint_residual for a in self.areas)

    @property
    def negative_count(self) -> int:
        return sum(a.negative_count for a in self.areas)


def constraint_residual(w_cal: np.ndarray, X: np.ndarray, target: np.ndarray) -> float:
    """max_q |sum_i w_i x_iq - X_q| / (1 + |X_q|)."""
    return float(np.max(np.abs(w_cal @ X - target) / (1.0 + np.abs(target))))


def calibrate_linear(w, X, target, area_id: str = "?", cond_max: float = COND_MAX) -> CalibratedWeights:
    """Calibrate weights ``w`` so that ``sum_i w_cal_i x_i = target``.

    Minimising sum (w - w_cal)^2 / w under the linear constraints gives
    ``w_cal_i = w_i (1 + x_i' lam)`` with ``lam = T^-1 (target - sum_i w_i x_i)``
    and ``T = sum_i w_i x_i x_i'``. T is handled through the SVD of
    ``sqrt(w) X``; a condition number of T above ``cond_max`` is an error.
    Negative calibrated weights are allowed and counted.
    """
    w = np.asarray(w, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    target = np.asarray(target, dtype=float)
    if X.shape[1] != target.size:
        raise CalibrationError(f"area {area_id}: {target.size} targets for {X.shape[1]} covariates")
    if np.any(w <= 0):
        raise CalibrationError(f"area {area_id}: base weights must be positive")
    n, p = X.shape
    if n < p:
        raise CalibrationError(
            f"area {area_id}: calibration infeasible, n_d={n} < p={p} constraints"
        )
    _, s, Vt = np.linalg.svd(np.sqrt(w)[:, None] * X, full_matrices=False)
    if s[-1] == 0 or (s[0] / s[-1]) ** 2 > cond_max:
        raise CalibrationError(
            f"area {area_id}: calibration infeasible, sum w x x' is singular or ill-conditioned"
        )
    T_inv = (Vt.T / s**2) @ Vt
    lam = T_inv @ (target - w @ X)
    w_cal = w * (1.0 + X @ lam)
    # one refinement step against rounding in the solve
    dlam = T_inv @ (target - w_cal @ X)
    lam = lam + dlam
    w_cal = w_cal + w * (X @ dlam)
    return CalibratedWeights(
        w_cal=w_cal,
        lagrange=lam,
        constraint_residual=constraint_residual(w_cal, X, target),
        negative_count=int(np.sum(w_cal <= 0)),
    )


def targets_array(sample: UnitSample, targets) -> np.ndarray:
    """Normalise targets (mapping area_id -> totals, or (D, p) array) to area order."""
    if isinstance(targets, Mapping):
        missing = [a for a in sample.area_ids if a not in targets]
        if missing:
            raise DataError(f"no calibration targets for area(s) {', '.join(missing)}")
        T = np.array([np.asarray(targets[a], dtype=float) for a in sample.area_ids])
    else:
        T = np.atleast_2d(np.asarray(targets, dtype=float))
    if T.shape != (sample.D, sample.p):
        raise DataError(f"targets have shape {T.shape}, expected {(sample.D, sample.p)}")
    bad = np.flatnonzero(T[:, 0] != sample.N)
    if bad.size:
        d = bad[0]
        raise DataError(
            f"area {sample.area_ids[d]}: intercept target {T[d, 0]:g} differs from N_d={sample.N[d]:g}"
        )
    return T


def calibrate_sample(sample: UnitSample, targets) -> CalibrationResult:
    """Calibrate every area of ``sample`` to its covariate totals."""
    T = targets_array(sample, targets)
    res = [calibrate_linear(a.w, a.X, T[d], a.area_id) for d, a in enumerate(sample.areas)]
    return CalibrationResult(sample.with_calibrated([r.w_cal for r in res]), res)


def greg_total(w_cal, y) -> float:
    """GREG estimate of an area total: sum of calibrated-weighted responses."""
    return float(np.asarray(w_cal, dtype=float) @ np.asarray(y, dtype=float))
