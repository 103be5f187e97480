"""Containers for unit- and area-level survey data, CSV I/O and weighted aggregation.

Areas are always held in lexicographic order of ``area_id`` so that every
per-area vector in the package is indexed the same way.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

_XCOL = re.compile(r"^x(\d+)$")
_XBARCOL = re.compile(r"^xbar_(\d+)$")
_TOTCOL = re.compile(r"^total_(\d+)$")


def _is_intercept(col: np.ndarray) -> bool:
    return bool(np.all(col == 1.0))


@dataclass
class AreaUnits:
    """Sampled units of a single area."""

    area_id: str
    N: float
    y: np.ndarray
    X: np.ndarray
    w: np.ndarray
    w_cal: np.ndarray | None = None

    def __post_init__(self):
        self.area_id = str(self.area_id)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.w = np.asarray(self.w, dtype=float).reshape(-1)
        n = self.y.shape[0]
        if n < 1:
            raise DataError(f"area {self.area_id}: no sampled units")
        if self.X.shape[0] != n or self.w.shape[0] != n:
            raise DataError(f"area {self.area_id}: y, X and w lengths differ")
        if np.any(self.w <= 0):
            raise DataError(f"area {self.area_id}: base weights must be positive")
        if not _is_intercept(self.X[:, 0]):
            raise DataError(f"area {self.area_id}: first covariate column must be the intercept")
        if self.w_cal is not None:
            self.w_cal = np.asarray(self.w_cal, dtype=float).reshape(-1)
            if self.w_cal.shape[0] != n:
                raise DataError(f"area {self.area_id}: w_cal length does not match w")
        if not np.isfinite(self.N) or self.N < n:
            raise DataError(f"area {self.area_id}: N_d={self.N} smaller than n_d={n}")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def weights(self, calibrated: bool) -> np.ndarray:
        if calibrated:
            if self.w_cal is None:
                raise DataError(
                    f"area {self.area_id}: calibrated weights requested but absent "
                    "(run the calibrate step first)"
                )
            return self.w_cal
        return self.w


@dataclass
class UnitSample:
    """Unit-level sample for all areas."""

    areas: list[AreaUnits]

    def __post_init__(self):
        if not self.areas:
            raise DataError("sample has no areas")
        self.areas = sorted(self.areas, key=lambda a: a.area_id)
        ids = [a.area_id for a in self.areas]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate area_id in sample")
        ps = {a.p for a in self.areas}
        if len(ps) != 1:
            raise DataError("number of covariates differs across areas")

    @property
    def D(self) -> int:
        return len(self.areas)

    @property
    def p(self) -> int:
        return self.areas[0].p

    @property
    def area_ids(self) -> list[str]:
        return [a.area_id for a in self.areas]

    @property
    def N(self) -> np.ndarray:
        return np.array([a.N for a in self.areas], dtype=float)

    @property
    def n_d(self) -> np.ndarray:
        return np.array([a.n for a in self.areas], dtype=int)

    @property
    def n(self) -> int:
        return int(self.n_d.sum())

    @property
    def has_calibrated(self) -> bool:
        return all(a.w_cal is not None for a in self.areas)

    @cached_property
    def stacked(self) -> "StackedSample":
        return StackedSample.from_sample(self)

    def with_calibrated(self, w_cal: Sequence[np.ndarray]) -> "UnitSample":
        return UnitSample([replace(a, w_cal=wc) for a, wc in zip(self.areas, w_cal)])

    def with_response(self, y: np.ndarray) -> "UnitSample":
        """Copy of the sample with the stacked response vector ``y`` swapped in."""
        off = self.stacked.offsets
        return UnitSample(
            [replace(a, y=y[off[d]:off[d + 1]]) for d, a in enumerate(self.areas)]
        )


@dataclass(frozen=True)
class StackedSample:
    """Flat view of a UnitSample; rows are grouped by area in area order."""

    y: np.ndarray
    X: np.ndarray
    w: np.ndarray
    w_cal: np.ndarray | None
    area: np.ndarray  # area index of each row
    offsets: np.ndarray  # offsets[d]:offsets[d+1] are the rows of area d
    N: np.ndarray

    @classmethod
    def from_sample(cls, s: UnitSample) -> "StackedSample":
        n_d = s.n_d
        offsets = np.concatenate([[0], np.cumsum(n_d)])
        w_cal = np.concatenate([a.w_cal for a in s.areas]) if s.has_calibrated else None
        return cls(
            y=np.concatenate([a.y for a in s.areas]),
            X=np.vstack([a.X for a in s.areas]),
            w=np.concatenate([a.w for a in s.areas]),
            w_cal=w_cal,
            area=np.repeat(np.arange(s.D), n_d),
            offsets=offsets,
            N=s.N,
        )

    def area_sum(self, v: np.ndarray) -> np.ndarray:
        """Per-area sums along the last (row) axis of ``v``."""
        return np.add.reduceat(v, self.offsets[:-1], axis=-1)


@dataclass
class AreaDataset:
    """Area-level aggregates.

    ``psi0`` holds NaN where no direct variance estimate is available.
    ``kind`` records which weights produced ``ybar``/``W2`` ("calibrated",
    "base" or "unknown" for data read from a CSV without that information).
    """

    area_id: list[str]
    N: np.ndarray
    n: np.ndarray
    ybar: np.ndarray
    Xbar: np.ndarray
    W2: np.ndarray
    wdot: np.ndarray
    psi0: np.ndarray = field(default=None)
    kind: str = "unknown"

    def __post_init__(self):
        self.area_id = [str(a) for a in self.area_id]
        D = len(self.area_id)
        self.N = np.asarray(self.N, dtype=float).reshape(-1)
        self.n = np.asarray(self.n, dtype=int).reshape(-1)
        self.ybar = np.asarray(self.ybar, dtype=float).reshape(-1)
        self.Xbar = np.atleast_2d(np.asarray(self.Xbar, dtype=float))
        self.W2 = np.asarray(self.W2, dtype=float).reshape(-1)
        self.wdot = np.asarray(self.wdot, dtype=float).reshape(-1)
        if self.psi0 is None:
            self.psi0 = np.full(D, np.nan)
        self.psi0 = np.asarray(self.psi0, dtype=float).reshape(-1)
        for name in ("N", "n", "ybar", "W2", "wdot", "psi0"):
            if getattr(self, name).shape[0] != D:
                raise DataError(f"area dataset: field {name} has wrong length")
        if self.Xbar.shape[0] != D:
            raise DataError("area dataset: Xbar has wrong number of rows")
        if self.area_id != sorted(self.area_id):
            order = np.argsort(np.array(self.area_id), kind="stable")
            self._reorder(order)
        if len(set(self.area_id)) != D:
            raise DataError("duplicate area_id in area dataset")
        bad = np.flatnonzero(~(self.W2 > 0))
        if bad.size:
            raise DataError(f"area {self.area_id[bad[0]]}: W2 must be positive")
        bad = np.flatnonzero(~(self.wdot > 0))
        if bad.size:
            raise DataError(f"area {self.area_id[bad[0]]}: sum of weights must be positive")
        bad = np.flatnonzero((self.n < 1) | (self.N < self.n))
        if bad.size:
            d = bad[0]
            raise DataError(
                f"area {self.area_id[d]}: need N_d >= n_d >= 1 (N_d={self.N[d]:g}, n_d={self.n[d]})"
            )
        bad = np.flatnonzero(self.psi0 < 0)
        if bad.size:
            raise DataError(f"area {self.area_id[bad[0]]}: psi0 must be non-negative")

    def _reorder(self, order):
        self.area_id = [self.area_id[i] for i in order]
        for name in ("N", "n", "ybar", "Xbar", "W2", "wdot", "psi0"):
            setattr(self, name, getattr(self, name)[order])

    @property
    def D(self) -> int:
        return len(self.area_id)

    @property
    def p(self) -> int:
        return self.Xbar.shape[1]

    @property
    def has_psi0(self) -> np.ndarray:
        return ~np.isnan(self.psi0)

    def with_psi0(self, psi0: np.ndarray) -> "AreaDataset":
        return replace(self, psi0=np.asarray(psi0, dtype=float))

    def with_ybar(self, ybar: np.ndarray) -> "AreaDataset":
        return replace(self, ybar=np.asarray(ybar, dtype=float))

    def subset(self, mask: np.ndarray) -> "AreaDataset":
        idx = np.flatnonzero(mask)
        return AreaDataset(
            area_id=[self.area_id[i] for i in idx],
            N=self.N[idx],
            n=self.n[idx],
            ybar=self.ybar[idx],
            Xbar=self.Xbar[idx],
            W2=self.W2[idx],
            wdot=self.wdot[idx],
            psi0=self.psi0[idx],
            kind=self.kind,
        )


@dataclass
class PopulationFrame:
    """Full population covariates (and optionally responses), stacked by area."""

    area_id: list[str]
    X: np.ndarray
    offsets: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=int)
        if self.offsets[0] != 0 or self.offsets[-1] != self.X.shape[0]:
            raise DataError("population offsets inconsistent with covariate rows")
        if len(self.area_id) != self.offsets.size - 1:
            raise DataError("population area count mismatch")
        if self.y is not None and self.y.shape[0] != self.X.shape[0]:
            raise DataError("population response length mismatch")

    @property
    def D(self) -> int:
        return len(self.area_id)

    @property
    def N(self) -> np.ndarray:
        return np.diff(self.offsets).astype(float)

    def area_X(self, d: int) -> np.ndarray:
        return self.X[self.offsets[d]:self.offsets[d + 1]]

    def totals(self) -> np.ndarray:
        """Per-area covariate totals, shape (D, p)."""
        return np.add.reduceat(self.X, self.offsets[:-1], axis=0)

    def means(self) -> np.ndarray:
        return self.totals() / self.N[:, None]


# --------------------------------------------------------------------------
# CSV input


def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file (header row is mandatory)") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    return header, rows


def _num(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"non-numeric value {cell!r} in column {col} at row {row}") from None


def _numbered(header, pattern) -> list[str]:
    cols = [(int(m.group(1)), h) for h in header if (m := pattern.match(h))]
    return [h for _, h in sorted(cols)]


def load_area_sizes(path) -> dict[str, float]:
    """Read a sidecar ``area_id,N`` file."""
    header, rows = _read_rows(path)
    for col in ("area_id", "N"):
        if col not in header:
            raise DataError(f"{path}: missing column {col}")
    ia, iN = header.index("area_id"), header.index("N")
    return {r[ia].strip(): _num(r[iN], k + 2, "N") for k, r in enumerate(rows)}


def load_unit_csv(path, schema: dict | None = None, area_sizes: dict[str, float] | None = None) -> UnitSample:
    """Read ``area_id,y,x1,...,xp,weight[,weight_cal][,N]`` into a UnitSample.

    ``schema`` maps the logical names (area_id, y, weight, weight_cal, N, x)
    to the file's column names; ``x`` maps to a list. Row numbers in error
    messages are file line numbers (the header is row 1).

    An intercept column is prepended unless ``x0`` is present or the first
    covariate is identically one. Area sizes come from an ``N`` column or
    from ``area_sizes``; if both are given they must agree.
    """
    header, rows = _read_rows(path)
    schema = dict(schema or {})
    col = {k: schema.get(k, k) for k in ("area_id", "y", "weight", "weight_cal", "N")}
    xcols = schema.get("x")
    if xcols is None:
        xcols = (["x0"] if "x0" in header else []) + _numbered(header, _XCOL)
        xcols = list(dict.fromkeys(xcols))
    for key in ("area_id", "y", "weight"):
        if col[key] not in header:
            raise DataError(f"{path}: missing column {col[key]}")
    for c in xcols:
        if c not in header:
            raise DataError(f"{path}: missing column {c}")
    idx = {h: i for i, h in enumerate(header)}
    has_cal = col["weight_cal"] in idx
    has_N = col["N"] in idx

    groups: dict[str, dict] = {}
    for k, r in enumerate(rows):
        rowno = k + 2
        if len(r) < len(header):
            raise DataError(f"row {rowno}: expected {len(header)} cells, got {len(r)}")
        aid = r[idx[col["area_id"]]].strip()
        g = groups.setdefault(aid, {"y": [], "x": [], "w": [], "wc": [], "N": set()})
        w = _num(r[idx[col["weight"]]], rowno, col["weight"])
        if not w > 0:
            raise DataError(f"non-positive weight at row {rowno}")
        g["w"].append(w)
        g["y"].append(_num(r[idx[col["y"]]], rowno, col["y"]))
        g["x"].append([_num(r[idx[c]], rowno, c) for c in xcols])
        if has_cal:
            g["wc"].append(_num(r[idx[col["weight_cal"]]], rowno, col["weight_cal"]))
        if has_N:
            g["N"].add(_num(r[idx[col["N"]]], rowno, col["N"]))

    if not groups:
        raise DataError(f"{path}: no data rows")
    X_all = np.array([x for g in groups.values() for x in g["x"]], dtype=float).reshape(-1, len(xcols))
    prepend = not (len(xcols) and _is_intercept(X_all[:, 0]))

    areas = []
    for aid, g in groups.items():
        X = np.array(g["x"], dtype=float).reshape(-1, len(xcols))
        if prepend:
            X = np.column_stack([np.ones(X.shape[0]), X])
        if len(g["N"]) > 1:
            raise DataError(f"area {aid}: inconsistent N values in unit file")
        N = g["N"].pop() if g["N"] else None
        if area_sizes is not None and aid in area_sizes:
            if N is not None and N != area_sizes[aid]:
                raise DataError(f"area {aid}: N in unit file ({N:g}) conflicts with sidecar ({area_sizes[aid]:g})")
            N = area_sizes[aid]
        if N is None:
            raise DataError(f"area {aid}: population size N_d not supplied")
        areas.append(
            AreaUnits(aid, N, np.array(g["y"]), X, np.array(g["w"]), np.array(g["wc"]) if has_cal else None)
        )
    return UnitSample(areas)


def load_area_csv(path) -> AreaDataset:
    """Read ``area_id,N,n,ybar,xbar_1,...,xbar_p,W2[,psi0][,wdot]``.

    Without a ``wdot`` column the weight sum defaults to ``N`` (true for
    calibrated weights and for SRSWOR expansion weights).
    """
    header, rows = _read_rows(path)
    xcols = _numbered(header, _XBARCOL)
    for c in ("area_id", "N", "n", "ybar", "W2"):
        if c not in header:
            raise DataError(f"{path}: missing column {c}")
    idx = {h: i for i, h in enumerate(header)}
    has_psi = "psi0" in idx
    has_wdot = "wdot" in idx
    ids, N, n, ybar, Xbar, W2, psi0, wdot = [], [], [], [], [], [], [], []
    for k, r in enumerate(rows):
        rowno = k + 2
        ids.append(r[idx["area_id"]].strip())
        N.append(_num(r[idx["N"]], rowno, "N"))
        nv = _num(r[idx["n"]], rowno, "n")
        if nv != int(nv):
            raise DataError(f"non-integer sample size at row {rowno}")
        n.append(int(nv))
        ybar.append(_num(r[idx["ybar"]], rowno, "ybar"))
        Xbar.append([_num(r[idx[c]], rowno, c) for c in xcols])
        W2.append(_num(r[idx["W2"]], rowno, "W2"))
        if has_psi and r[idx["psi0"]].strip() not in ("", "nan", "NA"):
            psi0.append(_num(r[idx["psi0"]], rowno, "psi0"))
        else:
            psi0.append(np.nan)
        wdot.append(_num(r[idx["wdot"]], rowno, "wdot") if has_wdot else N[-1])
    Xbar = np.array(Xbar, dtype=float).reshape(len(ids), len(xcols))
    if not (xcols and _is_intercept(Xbar[:, 0])):
        Xbar = np.column_stack([np.ones(len(ids)), Xbar])
    return AreaDataset(ids, N, n, ybar, Xbar, W2, wdot, np.array(psi0), kind="unknown")


def load_targets_csv(path, p: int | None = None, sizes: dict[str, float] | None = None) -> dict[str, np.ndarray]:
    """Read ``area_id,total_1,...,total_p`` calibration targets.

    ``total_1`` is the intercept total N_d. If the file carries one column
    fewer than ``p`` the area size from ``sizes`` is prepended.
    """
    header, rows = _read_rows(path)
    tcols = _numbered(header, _TOTCOL)
    if "area_id" not in header or not tcols:
        raise DataError(f"{path}: need columns area_id,total_1,...")
    idx = {h: i for i, h in enumerate(header)}
    out = {}
    for k, r in enumerate(rows):
        aid = r[idx["area_id"]].strip()
        t = np.array([_num(r[idx[c]], k + 2, c) for c in tcols])
        if p is not None and t.size == p - 1:
            if sizes is None or aid not in sizes:
                raise DataError(f"area {aid}: targets lack the intercept total and N_d is unknown")
            t = np.concatenate([[sizes[aid]], t])
        if p is not None and t.size != p:
            raise DataError(f"area {aid}: expected {p} targets, got {t.size}")
        out[aid] = t
    return out


# --------------------------------------------------------------------------
# CSV output


def fmt(x) -> str:
    """Shortest round-trip text for a float; ints stay ints."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if np.isnan(x):
        return "nan"
    return repr(x)


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([c if isinstance(c, str) else fmt(c) for c in r])


def write_unit_csv(path, sample: UnitSample) -> None:
    """Write a UnitSample; the intercept column is left implicit."""
    p = sample.p
    header = ["area_id", "y"] + [f"x{j}" for j in range(1, p)] + ["weight"]
    cal = sample.has_calibrated
    if cal:
        header.append("weight_cal")
    header.append("N")
    rows = []
    for a in sample.areas:
        for i in range(a.n):
            r = [a.area_id, a.y[i], *a.X[i, 1:], a.w[i]]
            if cal:
                r.append(a.w_cal[i])
            r.append(a.N)
            rows.append(r)
    write_csv(path, header, rows)


def write_area_csv(path, data: AreaDataset) -> None:
    p = data.p
    header = ["area_id", "N", "n", "ybar"] + [f"xbar_{j}" for j in range(1, p)] + ["W2", "psi0", "wdot"]
    rows = [
        [data.area_id[d], data.N[d], int(data.n[d]), data.ybar[d], *data.Xbar[d, 1:],
         data.W2[d], data.psi0[d], data.wdot[d]]
        for d in range(data.D)
    ]
    write_csv(path, header, rows)


# --------------------------------------------------------------------------
# aggregation


def weighted_means(sample: UnitSample, calibrated: bool) -> tuple[np.ndarray, np.ndarray]:
    """Survey-weighted area means of y and x.

    Base weights normalise by the weight sum; calibrated weights by N_d.
    """
    ybar = np.empty(sample.D)
    xbar = np.empty((sample.D, sample.p))
    for d, a in enumerate(sample.areas):
        w = a.weights(calibrated)
        denom = a.N if calibrated else w.sum()
        ybar[d] = w @ a.y / denom
        xbar[d] = w @ a.X / denom
    return ybar, xbar


def aggregate(sample: UnitSample, use_calibrated: bool, Xbar_true: np.ndarray | None = None,
              psi0: np.ndarray | None = None) -> AreaDataset:
    """Collapse a unit sample to area aggregates.

    ``Xbar_true`` (D, p) gives the population covariate means in area order.
    It may be omitted only with calibrated weights, whose weighted covariate
    means reproduce the population means by construction.
    """
    if use_calibrated and not sample.has_calibrated:
        raise DataError("calibrated weights requested but absent (run the calibrate step first)")
    ybar, xbar_w = weighted_means(sample, use_calibrated)
    if Xbar_true is None:
        if not use_calibrated:
            raise DataError("population covariate means are required with base weights")
        Xbar_true = xbar_w
    Xbar_true = np.atleast_2d(np.asarray(Xbar_true, dtype=float))
    if Xbar_true.shape != (sample.D, sample.p):
        raise DataError(f"Xbar_true has shape {Xbar_true.shape}, expected {(sample.D, sample.p)}")
    W2 = np.array([np.sum(a.weights(use_calibrated) ** 2) for a in sample.areas])
    wdot = np.array([a.w.sum() for a in sample.areas])
    return AreaDataset(
        area_id=sample.area_ids,
        N=sample.N,
        n=sample.n_d,
        ybar=ybar,
        Xbar=Xbar_true,
        W2=W2,
        wdot=wdot,
        psi0=psi0,
        kind="calibrated" if use_calibrated else "base",
    )
