"""Monte Carlo harness: fixed population covariates and sample, replicated responses.

Random streams are keyed by SeedSequence([seed, stream, replicate]):
stream 0 draws the covariates, 1 the sample, 2 the estimation replicates,
3 the long reference run for true MSEs, 4 the MSE-evaluation replicates and
5 their bootstraps (with the bootstrap index appended). Replicates are
processed in fixed chunks so the output does not depend on the number of
worker processes.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .calibration import calibrate_sample
from .data import AreaUnits, PopulationFrame, UnitSample, aggregate, write_csv
from .direct import psi0_batch
from .errors import ConfigError, ConvergenceError, DataError, SAEError
from .mse import bootstrap_mse_area, bootstrap_mse_unit, mse_prasad_rao
from .predictors import shrink_batch, unit_predictor_batch
from .varcomp import (
    BHFDesign, fit_bhf_batch, fit_fh_batch, fit_reml_bhf, fit_reml_fh, fit_reml_structured_area,
    fit_structured_batch, pseudo_stats, structure_constants,
)

STREAM_X, STREAM_SAMPLE, STREAM_EST, STREAM_TRUE, STREAM_MSE, STREAM_BOOT = range(6)
CHUNK = 25
MAX_FAIL = 0.05
SIM_ESTIMATORS = ("DIR", "FHD", "FHA", "UA", "U", "YR")
MSE_METHODS = {
    "FHD": ("PR", "PB1", "PBT", "PB2"),
    "UA": ("PR", "PB1", "PBT", "PB2"),
    "FHA": ("PR", "PB1", "PBT", "PB2"),
    "U": ("PB",),
    "YR": ("PB",),
}


@dataclass
class SimConfig:
    D: int = 25
    N_d: np.ndarray = field(default_factory=lambda: np.full(25, 10_000))
    n_d: np.ndarray = field(default_factory=lambda: np.repeat([3, 5, 10, 15, 50], 5))
    beta: np.ndarray = field(default_factory=lambda: np.array([4.0, 0.5, -0.4]))
    sigma_u2: float = 0.01
    sigma_e2: float = 0.09
    shape_base: np.ndarray = field(default_factory=lambda: np.array([5.0, 2.0]))
    shape_slope: np.ndarray = field(default_factory=lambda: np.array([3.0, 0.0]))
    L: int = 200
    B: int = 500
    L_true: int = 2000
    L_mse: int = 0
    weights: str = "calibrated"
    estimators: tuple = ("DIR", "FHD", "UA", "U")
    mse_methods: tuple = ()  # entries "ESTIMATOR:METHOD"
    psi0_design: str = "greg"
    pb_fit: str = "area"
    seed: int = 1

    def __post_init__(self):
        self.N_d = np.broadcast_to(np.asarray(self.N_d, dtype=int), (self.D,)).copy()
        self.n_d = np.broadcast_to(np.asarray(self.n_d, dtype=int), (self.D,)).copy()
        self.beta = np.asarray(self.beta, dtype=float)
        self.shape_base = np.asarray(self.shape_base, dtype=float)
        self.shape_slope = np.asarray(self.shape_slope, dtype=float)
        self.estimators = tuple(e.upper() for e in self.estimators)
        self.mse_methods = tuple(m.upper() for m in self.mse_methods)
        self.validate()

    @property
    def p(self) -> int:
        return self.beta.size

    def validate(self):
        if self.D < 3:
            raise ConfigError("need at least 3 areas")
        if self.shape_base.size != self.p - 1 or self.shape_slope.size != self.p - 1:
            raise ConfigError("one Gamma shape (base and slope) per covariate is needed")
        if np.any(self.n_d < 1) or np.any(self.n_d > self.N_d):
            raise ConfigError("need 1 <= n_d <= N_d in every area")
        if self.L < 1 or self.L_true < 0 or self.L_mse < 0:
            raise ConfigError("replicate counts must be positive")
        if self.sigma_u2 < 0 or self.sigma_e2 < 0:
            raise ConfigError("variances must be non-negative")
        if np.any(self.shape_base + self.shape_slope * np.arange(1, self.D + 1)[:, None] / self.D <= 0):
            raise ConfigError("Gamma shapes must be positive")
        if self.weights not in ("calibrated", "base"):
            raise ConfigError(f"weights must be calibrated or base, not {self.weights!r}")
        if self.psi0_design not in ("srswor", "general", "greg"):
            raise ConfigError(f"unknown psi0_design {self.psi0_design!r}")
        if self.pb_fit not in ("area", "unit"):
            raise ConfigError(f"pb_fit must be area or unit, not {self.pb_fit!r}")
        bad = [e for e in self.estimators if e not in SIM_ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimator(s) {bad}")
        if self.weights == "base" and {"UA", "U"} & set(self.estimators + self._mse_estimators()):
            raise ConfigError("UA and U need calibrated weights")
        if "FHD" in self.estimators + self._mse_estimators() and np.any(self.n_d < 2):
            raise ConfigError("FHD needs n_d >= 2 in every area for psi0")
        for m in self.mse_methods:
            est, _, meth = m.partition(":")
            if meth not in MSE_METHODS.get(est, ()):
                raise ConfigError(f"unknown MSE method {m!r}")
        if self.mse_methods and self.B < 50:
            raise ConfigError("bootstrap needs B >= 50")

    def _mse_estimators(self) -> tuple:
        return tuple(m.partition(":")[0] for m in self.mse_methods)

    @property
    def area_ids(self) -> list[str]:
        w = len(str(self.D))
        return [f"d{d + 1:0{w}d}" for d in range(self.D)]

    def shapes(self) -> np.ndarray:
        """Gamma shapes k_qd, shape (D, p-1)."""
        d = np.arange(1, self.D + 1)[:, None]
        return self.shape_base + self.shape_slope * d / self.D


_ARRAY_KEYS = {"N_d", "n_d", "beta", "shape_base", "shape_slope"}
_INT_KEYS = {"D", "L", "B", "L_true", "L_mse", "seed"}
_FLOAT_KEYS = {"sigma_u2", "sigma_e2"}
_TUPLE_KEYS = {"estimators", "mse_methods"}
_STR_KEYS = {"weights", "psi0_design", "pb_fit"}


def parse_config(text: str, source: str = "<config>") -> SimConfig:
    """Flat ``key = value`` text; arrays are comma-separated, ``#`` starts a comment.

    ``n_repeat = k`` repeats each listed n_d value k times.
    """
    raw: dict[str, str] = {}
    for k, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{k}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        raw[key] = val
    return config_from_dict(raw, source)


def config_from_dict(raw: dict, source: str = "<config>") -> SimConfig:
    known = {f.name for f in fields(SimConfig)} | {"n_repeat"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {sorted(unknown)}")
    kw = {}
    try:
        for key, val in raw.items():
            if key == "n_repeat":
                continue
            if not isinstance(val, str):
                kw[key] = val
            elif key in _ARRAY_KEYS:
                kw[key] = np.array([float(v) for v in val.split(",") if v.strip()])
            elif key in _INT_KEYS:
                kw[key] = int(val)
            elif key in _FLOAT_KEYS:
                kw[key] = float(val)
            elif key in _TUPLE_KEYS:
                kw[key] = tuple(v.strip() for v in val.split(",") if v.strip())
            else:
                kw[key] = val
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if "n_repeat" in raw and "n_d" in kw:
        kw["n_d"] = np.repeat(kw["n_d"], int(raw["n_repeat"]))
    if "D" not in kw and "n_d" in kw and np.size(kw["n_d"]) > 1:
        kw["D"] = int(np.size(kw["n_d"]))
    for k in ("N_d", "n_d"):
        if k in kw:
            a = np.asarray(kw[k])
            if np.any(a != np.round(a)):
                raise ConfigError(f"{source}: {k} must be integers")
            kw[k] = a.astype(int)
    D = kw.get("D", 25)
    for k in ("N_d", "n_d"):
        if k in kw and np.size(kw[k]) not in (1, D):
            raise ConfigError(f"{source}: {k} has {np.size(kw[k])} entries for D={D}")
    return SimConfig(**kw)


def bundled_configs() -> list[str]:
    return sorted(p.name for p in resources.files("sae").joinpath("configs").iterdir() if p.name.endswith(".cfg"))


def load_config(path_or_name) -> SimConfig:
    """Read a config file, or a bundled one by file name."""
    p = Path(path_or_name)
    if p.exists():
        return parse_config(p.read_text(encoding="utf-8"), str(p))
    res = resources.files("sae").joinpath("configs").joinpath(p.name)
    if res.is_file():
        return parse_config(res.read_text(encoding="utf-8"), p.name)
    raise ConfigError(f"config not found: {path_or_name} (bundled: {', '.join(bundled_configs())})")


# --------------------------------------------------------------------------
# population and sample


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def generate_covariates(cfg: SimConfig, seed: int | None = None) -> PopulationFrame:
    """Population covariates x_q ~ Gamma(k_qd, 1) with an intercept column."""
    seed = cfg.seed if seed is None else seed
    rng = _rng(seed, STREAM_X)
    k = cfg.shapes()
    blocks = []
    for d in range(cfg.D):
        Xd = np.empty((cfg.N_d[d], cfg.p))
        Xd[:, 0] = 1.0
        for q in range(cfg.p - 1):
            Xd[:, q + 1] = rng.gamma(k[d, q], 1.0, cfg.N_d[d])
        blocks.append(Xd)
    offsets = np.concatenate([[0], np.cumsum(cfg.N_d)])
    return PopulationFrame(cfg.area_ids, np.vstack(blocks), offsets)


def draw_responses(frame: PopulationFrame, cfg: SimConfig, rng: np.random.Generator, xb=None):
    """One population of responses from the nested-error model; returns (y, mu, u)."""
    u = rng.standard_normal(frame.D) * np.sqrt(cfg.sigma_u2)
    e = rng.standard_normal(frame.X.shape[0]) * np.sqrt(cfg.sigma_e2)
    xb = frame.X @ cfg.beta if xb is None else xb
    y = xb + np.repeat(u, np.diff(frame.offsets)) + e
    mu = np.add.reduceat(y, frame.offsets[:-1]) / frame.N
    return y, mu, u


def generate_population(cfg: SimConfig, seed: int | None = None, replicate: int = 0) -> PopulationFrame:
    """Covariates (fixed for a seed) plus the responses of replicate ``replicate``."""
    seed = cfg.seed if seed is None else seed
    frame = generate_covariates(cfg, seed)
    y, _, _ = draw_responses(frame, cfg, _rng(seed, STREAM_EST, replicate))
    frame.y = y
    return frame


def sample_indices(frame: PopulationFrame, n_d, seed: int) -> np.ndarray:
    """SRSWOR within each area; returns sorted population row indices, area by area."""
    n_d = np.broadcast_to(np.asarray(n_d, dtype=int), (frame.D,))
    N = frame.N.astype(int)
    if np.any(n_d > N) or np.any(n_d < 1):
        raise DataError("SRSWOR needs 1 <= n_d <= N_d")
    rng = _rng(seed, STREAM_SAMPLE)
    idx = [frame.offsets[d] + np.sort(rng.choice(N[d], n_d[d], replace=False)) for d in range(frame.D)]
    return np.concatenate(idx)


def draw_srswor(frame: PopulationFrame, n_d, seed: int) -> UnitSample:
    """SRSWOR sample with expansion weights N_d / n_d (responses from frame.y, else zeros)."""
    n_d = np.broadcast_to(np.asarray(n_d, dtype=int), (frame.D,))
    idx = sample_indices(frame, n_d, seed)
    y = frame.y[idx] if frame.y is not None else np.zeros(idx.size)
    off = np.concatenate([[0], np.cumsum(n_d)])
    N = frame.N
    areas = [
        AreaUnits(frame.area_id[d], N[d], y[off[d]:off[d + 1]], frame.X[idx[off[d]:off[d + 1]]],
                  np.full(n_d[d], N[d] / n_d[d]))
        for d in range(frame.D)
    ]
    return UnitSample(areas)


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    rb: np.ndarray
    rrmse: np.ndarray
    mse: np.ndarray
    mean_mu: np.ndarray


def compute_metrics(est: np.ndarray, truth: np.ndarray) -> Metrics:
    """RB and RRMSE per area from (L, D) arrays of estimates and true means."""
    est = np.atleast_2d(np.asarray(est, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape != truth.shape:
        raise DataError("estimates and truths must have the same shape")
    m = truth.mean(axis=0)
    if np.any(m == 0):
        raise DataError("relative metrics undefined: mean true value is zero")
    err = est - truth
    mse = np.mean(err**2, axis=0)
    return Metrics(rb=err.mean(axis=0) / m, rrmse=np.sqrt(mse) / m, mse=mse, mean_mu=m)


def group_averages(values: np.ndarray, n_d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Averages of ``values`` over areas sharing a sample size; returns (sizes, means)."""
    sizes = np.unique(n_d)
    return sizes, np.array([values[n_d == s].mean() for s in sizes])


# --------------------------------------------------------------------------
# experiment context shared with worker processes

_CTX: dict | None = None


def _init_worker(ctx):
    global _CTX
    _CTX = ctx
    warnings.simplefilter("ignore")


def _build_context(cfg: SimConfig) -> dict:
    frame = generate_covariates(cfg)
    idx = sample_indices(frame, cfg.n_d, cfg.seed)
    sample = draw_srswor(frame, cfg.n_d, cfg.seed)
    Xbar = frame.means()
    cal = None
    if cfg.weights == "calibrated":
        cal = calibrate_sample(sample, frame.totals())
        sample = cal.sample
    kind = cfg.weights
    need = set(cfg.estimators) | set(cfg._mse_estimators())
    ctx = dict(
        cfg=cfg, xb_pop=frame.X @ cfg.beta, offsets=frame.offsets, N=frame.N, idx=idx, sample=sample,
        Xbar=Xbar, kind=kind, need=need,
        negative_weights=0 if cal is None else cal.negative_count,
        calibration_residual=np.nan if cal is None else cal.constraint_residual,
    )
    st = sample.stacked
    ctx["w_dir"] = st.w_cal if kind == "calibrated" else st.w
    ctx["w_base"] = st.w
    if need & {"U", "YR"}:
        ctx["design"] = BHFDesign.from_sample(sample)
    if "U" in need:
        ctx["ps_cal"] = pseudo_stats(sample, "calibrated")
    if "YR" in need:
        ctx["ps_base"] = pseudo_stats(sample, "base")
    W2b = np.array([np.sum(a.w**2) for a in sample.areas])
    wdot = np.array([a.w.sum() for a in sample.areas])
    ctx["c_base"] = W2b / wdot**2
    if sample.has_calibrated:
        ctx["c_cal"] = np.array([np.sum(a.w_cal**2) for a in sample.areas]) / frame.N**2
    return ctx


def _responses(ctx, stream, ells):
    """Sample responses (m, n) and true means (m, D) for replicates ``ells``."""
    cfg = ctx["cfg"]
    sizes = np.diff(ctx["offsets"])
    Y = np.empty((len(ells), ctx["idx"].size))
    MU = np.empty((len(ells), cfg.D))
    for i, ell in enumerate(ells):
        rng = _rng(cfg.seed, stream, ell)
        u = rng.standard_normal(cfg.D) * np.sqrt(cfg.sigma_u2)
        e = rng.standard_normal(ctx["xb_pop"].size) * np.sqrt(cfg.sigma_e2)
        y = ctx["xb_pop"] + np.repeat(u, sizes) + e
        MU[i] = np.add.reduceat(y, ctx["offsets"][:-1]) / ctx["N"]
        Y[i] = y[ctx["idx"]]
    return Y, MU


def _area_means(ctx, Y, w, base: bool):
    off = ctx["sample"].stacked.offsets
    S = np.add.reduceat(Y * w, off[:-1], axis=1)
    denom = np.add.reduceat(w, off[:-1]) if base else ctx["N"]
    return S / denom


def _estimate(ctx, Y, estimators):
    """All requested point estimators for responses Y (m, n); returns {est: (pred, ok)}."""
    cfg, Xbar, sample = ctx["cfg"], ctx["Xbar"], ctx["sample"]
    kind = ctx["kind"]
    out = {}
    ydir = _area_means(ctx, Y, ctx["w_dir"], kind == "base")
    ybase = ydir if kind == "base" else _area_means(ctx, Y, ctx["w_base"], True)
    if "DIR" in estimators:
        out["DIR"] = (ydir, np.ones(Y.shape[0], dtype=bool))
    if "FHD" in estimators:
        psi0 = psi0_batch(sample, Y, kind, cfg.psi0_design)
        fb = fit_fh_batch(ydir, Xbar, psi0)
        out["FHD"] = (shrink_batch(fb.sigma_u2, psi0, ydir, fb.beta @ Xbar.T), fb.converged)
    for est, yd, c in (("UA", ydir, ctx.get("c_cal")), ("FHA", ybase, ctx["c_base"])):
        if est in estimators:
            fb = fit_structured_batch(yd, Xbar, c)
            out[est] = (shrink_batch(fb.sigma_u2, fb.sigma_e2[:, None] * c, yd, fb.beta @ Xbar.T), fb.converged)
    if {"U", "YR"} & set(estimators):
        fb = fit_bhf_batch(Y, ctx["design"])
        for est, ps in (("U", ctx.get("ps_cal")), ("YR", ctx.get("ps_base"))):
            if est in estimators:
                out[est] = (unit_predictor_batch(fb.sigma_u2, fb.sigma_e2, Y, ps, Xbar), fb.converged)
    return {k: (p, ok & np.all(np.isfinite(p), axis=1)) for k, (p, ok) in out.items()}


def _estimate_chunk(stream, span):
    ctx = _CTX
    ells = list(range(*span))
    Y, MU = _responses(ctx, stream, ells)
    est = _estimate(ctx, Y, ctx["cfg"].estimators if stream == STREAM_EST else ctx["true_estimators"])
    return MU, est


def _mse_one(ell):
    """All requested MSE estimates for MSE-evaluation replicate ``ell``; returns {(est, meth): (D,)}."""
    ctx = _CTX
    cfg, Xbar = ctx["cfg"], ctx["Xbar"]
    Y, _ = _responses(ctx, STREAM_MSE, [ell])
    sample = ctx["sample"].with_response(Y[0])
    key = (cfg.seed, STREAM_BOOT, ell)
    out = {}
    want = {}
    for m in cfg.mse_methods:
        e, _, meth = m.partition(":")
        want.setdefault(e, []).append(meth)
    bhf = None

    def get_bhf():
        nonlocal bhf
        if bhf is None:
            bhf = fit_reml_bhf(sample)
        return bhf

    for est, meths in want.items():
        if est in ("U", "YR"):
            rep = bootstrap_mse_unit(get_bhf(), sample, _areas(ctx, sample, "base"), est, cfg.B, key + (1 if est == "U" else 2,))
            out[(est, "PB")] = rep.mse
            continue
        weights = "base" if est == "FHA" else cfg.weights
        data = _areas(ctx, sample, weights)
        if est == "FHD":
            data = data.with_psi0(psi0_batch(sample, Y, weights, cfg.psi0_design)[0])
        c = structure_constants(data, "calibrated" if weights == "calibrated" else "base").c
        if meths == ["PR"]:
            if est == "FHD":
                fit = fit_reml_fh(data, data.psi0)
                out[(est, "PR")] = mse_prasad_rao(fit, data.psi0, data).mse
            else:
                fit = fit_reml_structured_area(data, c)
                out[(est, "PR")] = mse_prasad_rao(fit, fit.psi, data).mse
            continue
        gen = get_bhf() if cfg.pb_fit == "unit" else fit_reml_structured_area(data, c)
        tag = {"FHD": 3, "UA": 4, "FHA": 5}[est]
        reps = bootstrap_mse_area(gen, data, est, cfg.B, key + (tag,), c=c)
        for meth in meths:
            out[(est, meth)] = reps[meth].mse
    return out


def _areas(ctx, sample: UnitSample, weights: str):
    return aggregate(sample, weights == "calibrated", ctx["Xbar"])


def _map(fn, tasks, ctx, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as ex:
            return list(ex.map(fn, *zip(*tasks)))
    global _CTX
    prev = _CTX
    _CTX = ctx
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return [fn(*t) for t in tasks]
    finally:
        _CTX = prev


def _run_estimates(ctx, stream, L, workers, progress=None):
    spans = [(s, min(s + CHUNK, L)) for s in range(0, L, CHUNK)]
    parts = _map(_estimate_chunk, [(stream, sp) for sp in spans], ctx, workers)
    MU = np.concatenate([p[0] for p in parts])
    names = parts[0][1].keys()
    est = {k: np.concatenate([p[1][k][0] for p in parts]) for k in names}
    ok = {k: np.concatenate([p[1][k][1] for p in parts]) for k in names}
    return MU, est, ok


# --------------------------------------------------------------------------
# experiment


@dataclass
class MseEval:
    estimator: str
    method: str
    mean_estimate: np.ndarray
    se_estimate: np.ndarray
    true_mse: np.ndarray
    true_se: np.ndarray
    replicates: int


@dataclass
class SimResult:
    config: SimConfig
    area_id: list[str]
    n_d: np.ndarray
    metrics: dict[str, Metrics]
    failures: dict[str, int]
    L: int
    mse_eval: list[MseEval] = field(default_factory=list)
    negative_weights: int = 0
    calibration_residual: float = float("nan")

    def group_table(self):
        """Rows (estimator, n_d, areas, ARB %, RRMSE %)."""
        rows = []
        for est, m in self.metrics.items():
            sizes, arb = group_averages(np.abs(m.rb), self.n_d)
            _, rr = group_averages(m.rrmse, self.n_d)
            for s, a, r in zip(sizes, arb, rr):
                rows.append((est, int(s), int(np.sum(self.n_d == s)), 100 * a, 100 * r))
        return rows

    def group_rrmse(self, est: str) -> dict[int, float]:
        return {r[1]: r[4] for r in self.group_table() if r[0] == est}

    def group_mse_eval(self, est: str, method: str) -> list[tuple[int, float, float, float]]:
        """(n_d, mean estimate, true MSE, MC standard error of the difference) per size group."""
        ev = next(e for e in self.mse_eval if e.estimator == est and e.method == method)
        out = []
        for s in np.unique(self.n_d):
            g = self.n_d == s
            k = g.sum()
            se = np.sqrt(np.sum(ev.se_estimate[g] ** 2) + np.sum(ev.true_se[g] ** 2)) / k
            out.append((int(s), float(ev.mean_estimate[g].mean()), float(ev.true_mse[g].mean()), float(se)))
        return out


def _check_failures(ok: dict[str, np.ndarray], what: str) -> dict[str, int]:
    fails = {k: int((~v).sum()) for k, v in ok.items()}
    for k, f in fails.items():
        if f > MAX_FAIL * ok[k].size:
            raise ConvergenceError(f"{what}: estimator {k} failed in {f} of {ok[k].size} replicates")
    return fails


def _metrics(est, ok, MU):
    out = {}
    for k in est:
        m = ok[k]
        out[k] = compute_metrics(est[k][m], MU[m])
    return out


def run_experiment(cfg: SimConfig, workers: int = 1, progress=None) -> SimResult:
    """Estimation replicates, plus (when MSE methods are configured) the true-MSE
    reference run and the MSE-evaluation replicates."""
    def say(msg):
        if progress is not None:
            progress(msg)

    ctx = _build_context(cfg)
    say(f"estimation run: L={cfg.L}")
    MU, est, ok = _run_estimates(ctx, STREAM_EST, cfg.L, workers)
    fails = _check_failures(ok, "estimation run")
    res = SimResult(cfg, cfg.area_ids, cfg.n_d.copy(), _metrics(est, ok, MU), fails, cfg.L,
                    negative_weights=ctx["negative_weights"], calibration_residual=ctx["calibration_residual"])
    if not cfg.mse_methods:
        return res
    if cfg.L_true < 2 or cfg.L_mse < 1:
        raise ConfigError("MSE evaluation needs L_true >= 2 and L_mse >= 1")
    ctx["true_estimators"] = tuple(sorted(set(cfg._mse_estimators())))
    say(f"true-MSE reference run: L_true={cfg.L_true}")
    MUt, estt, okt = _run_estimates(ctx, STREAM_TRUE, cfg.L_true, workers)
    _check_failures(okt, "reference run")
    say(f"MSE evaluation: L_mse={cfg.L_mse}, B={cfg.B}")
    parts = _map(_mse_one_safe, [(ell,) for ell in range(cfg.L_mse)], ctx, workers)
    failed = sum(p is None for p in parts)
    if failed > MAX_FAIL * cfg.L_mse:
        raise ConvergenceError(f"MSE evaluation failed in {failed} of {cfg.L_mse} replicates")
    good = [p for p in parts if p is not None]
    for m in cfg.mse_methods:
        e, _, meth = m.partition(":")
        vals = np.array([p[(e, meth)] for p in good])
        err2 = (estt[e][okt[e]] - MUt[okt[e]]) ** 2
        res.mse_eval.append(MseEval(
            e, meth, vals.mean(axis=0), vals.std(axis=0, ddof=1) / np.sqrt(len(good)) if len(good) > 1
            else np.full(cfg.D, np.nan), err2.mean(axis=0), err2.std(axis=0, ddof=1) / np.sqrt(err2.shape[0]),
            len(good),
        ))
    return res


def _mse_one_safe(ell):
    try:
        return _mse_one(ell)
    except SAEError:
        return None


# --------------------------------------------------------------------------
# output


def write_results(res: SimResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "summary.csv", out / "per_area.csv"]
    write_csv(paths[0], ["estimator", "n_d", "areas", "ARB_pct", "RRMSE_pct"], res.group_table())
    rows = []
    for est, m in res.metrics.items():
        for d, a in enumerate(res.area_id):
            rows.append([a, int(res.n_d[d]), est, 100 * m.rb[d], 100 * m.rrmse[d], m.mse[d], m.mean_mu[d]])
    write_csv(paths[1], ["area_id", "n_d", "estimator", "RB_pct", "RRMSE_pct", "MSE", "mean_mu"], rows)
    if res.mse_eval:
        paths.append(out / "mse_eval.csv")
        rows = []
        for ev in res.mse_eval:
            for d, a in enumerate(res.area_id):
                rows.append([a, int(res.n_d[d]), ev.estimator, ev.method, ev.mean_estimate[d], ev.se_estimate[d],
                             ev.true_mse[d], ev.true_se[d], ev.replicates])
        write_csv(paths[-1], ["area_id", "n_d", "estimator", "method", "mean_estimate", "mc_se_estimate",
                              "true_mse", "mc_se_true", "replicates"], rows)
    return paths
