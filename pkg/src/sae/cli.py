"""Command-line entry point: ``sae {calibrate,direct,fit,predict,mse,simulate,diagnose}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. ``--threads`` defaults to $SAE_THREADS (else 1) and
never changes results.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import calibrate_sample
from .data import (
    AreaDataset, UnitSample, aggregate, load_area_csv, load_area_sizes, load_targets_csv, load_unit_csv,
    write_area_csv, write_csv, write_unit_csv,
)
from .diagnostics import residual_diagnostics
from .direct import DESIGNS, direct_estimates
from .errors import ConfigError, DataError, SAEError
from .mse import bootstrap_mse_area, bootstrap_mse_unit, mse_prasad_rao
from .predictors import area_predictor, direct_predictor, unit_predictor
from .simulate import bundled_configs, load_config, run_experiment, write_results
from .varcomp import fit_reml_bhf, fit_reml_fh, fit_reml_structured_area, structure_constants

ENV_THREADS = "SAE_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    raw = os.environ.get(ENV_THREADS, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# shared input helpers


def _unit_sample(args) -> UnitSample:
    sizes = load_area_sizes(args.sizes_csv) if getattr(args, "sizes_csv", None) else None
    return load_unit_csv(args.unit_csv, area_sizes=sizes)


def _xbar_from_targets(args, sample: UnitSample) -> np.ndarray | None:
    if not getattr(args, "targets_csv", None):
        return None
    sizes = dict(zip(sample.area_ids, sample.N))
    t = load_targets_csv(args.targets_csv, sample.p, sizes)
    missing = [a for a in sample.area_ids if a not in t]
    if missing:
        raise DataError(f"no population totals for area(s) {', '.join(missing)}")
    T = np.array([t[a] for a in sample.area_ids])
    return T / sample.N[:, None]


def _need(args, *names):
    for n in names:
        if not getattr(args, n.replace("-", "_"), None):
            raise ConfigError(f"--{n} is required here")


def _area_data(args) -> AreaDataset:
    _need(args, "area-csv")
    return load_area_csv(args.area_csv)


def _structure(data: AreaDataset, source: str) -> np.ndarray:
    return structure_constants(data, source).c


# --------------------------------------------------------------------------
# subcommands


def cmd_calibrate(args):
    sample = _unit_sample(args)
    sizes = dict(zip(sample.area_ids, sample.N))
    targets = load_targets_csv(args.targets_csv, sample.p, sizes)
    res = calibrate_sample(sample, targets)
    write_unit_csv(args.out, res.sample)
    print(f"calibrated {sample.D} areas; max constraint residual {res.constraint_residual:.3g}; "
          f"non-positive weights {res.negative_count}", file=sys.stderr)


def cmd_direct(args):
    sample = _unit_sample(args)
    kind = "calibrated" if args.calibrated else "base"
    xbar = _xbar_from_targets(args, sample)
    if xbar is None and kind == "base":
        raise ConfigError("--targets-csv is required with base weights (population covariate means)")
    est = direct_estimates(sample, kind, args.design)
    data = aggregate(sample, kind == "calibrated", xbar, est.psi0)
    write_area_csv(args.out, data)


def _fit(args):
    if args.model == "bhf":
        _need(args, "unit-csv")
        return fit_reml_bhf(_unit_sample(args)), None
    data = _area_data(args)
    if args.model == "fh":
        keep = data.has_psi0
        if not keep.all():
            warnings.warn(f"{int((~keep).sum())} area(s) without psi0 left out of the FH fit")
        sub = data.subset(keep)
        return fit_reml_fh(sub, sub.psi0), sub
    return fit_reml_structured_area(data, _structure(data, args.structure)), data


def cmd_fit(args):
    fit, _ = _fit(args)
    write_csv(args.out, ["parameter", "value"], fit.report_rows())


def cmd_predict(args):
    est = args.estimator.upper()
    if est in ("U", "YR"):
        _need(args, "unit-csv")
        sample = _unit_sample(args)
        if est == "U" and not sample.has_calibrated:
            raise DataError("estimator u needs a weight_cal column (run the calibrate step first)")
        xbar = _xbar_from_targets(args, sample)
        if xbar is None and est == "YR":
            raise ConfigError("--targets-csv is required for yr (population covariate means)")
        fit = fit_reml_bhf(sample)
        data = None if xbar is None else aggregate(sample, False, xbar)
        res = unit_predictor(fit, sample, data, est)
    else:
        data = _area_data(args)
        if est == "DIR":
            res = direct_predictor(data)
        elif est == "FHD":
            sub = data.subset(data.has_psi0)
            fit = fit_reml_fh(sub, sub.psi0)
            res = area_predictor(fit, data, "FHD")
        else:
            source = "calibrated" if est == "UA" else "base"
            fit = fit_reml_structured_area(data, _structure(data, source))
            res = area_predictor(fit, data, est)
    write_csv(args.out, ["area_id", "estimate", "gamma", "direct_part", "synthetic_part"], res.rows())


def cmd_mse(args):
    est, method = args.estimator.upper(), args.method.upper()
    threads = args.threads
    if method == "PB":
        if est not in ("U", "YR"):
            raise ConfigError("--method pb applies to estimators u and yr")
        _need(args, "unit-csv")
        sample = _unit_sample(args)
        xbar = _xbar_from_targets(args, sample)
        if xbar is None and est == "YR":
            raise ConfigError("--targets-csv is required for yr (population covariate means)")
        data = None if xbar is None else aggregate(sample, False, xbar)
        rep = bootstrap_mse_unit(fit_reml_bhf(sample), sample, data, est, args.B, args.seed, threads)
        reports = [rep]
    else:
        if est not in ("FHD", "UA", "FHA"):
            raise ConfigError(f"--method {args.method} applies to estimators fhd, ua and fha")
        data = _area_data(args)
        source = args.structure or ("base" if est == "FHA" else "calibrated")
        c = _structure(data, source)
        if method == "PR":
            if est == "FHD":
                keep = data.has_psi0
                sub = data.subset(keep)
                pr = mse_prasad_rao(fit_reml_fh(sub, sub.psi0), sub.psi0, sub, est)
                for name in ("mse", "g1", "g2", "g3"):
                    v = np.full(data.D, np.nan)
                    v[keep] = getattr(pr, name)
                    setattr(pr, name, v)
                pr.area_id = list(data.area_id)
            else:
                fit = fit_reml_structured_area(data, c)
                pr = mse_prasad_rao(fit, fit.psi, data, est)
            reports = [pr]
        else:
            if args.pb_fit == "unit":
                _need(args, "unit-csv")
                gen = fit_reml_bhf(_unit_sample(args))
            else:
                gen = fit_reml_structured_area(data, c)
            reps = bootstrap_mse_area(gen, data, est, args.B, args.seed, c=c, workers=threads)
            reports = [reps[method]]
    with_g = reports[0].g1 is not None
    header = ["area_id", "method", "mse"] + (["g1", "g2", "g3"] if with_g else [])
    write_csv(args.out, header, ([r[0], *r[2:]] for rep in reports for r in rep.rows()))


def cmd_simulate(args):
    cfg = load_config(args.config)
    over = {k: getattr(args, k) for k in ("L", "seed", "B", "L_true", "L_mse") if getattr(args, k) is not None}
    if over:
        from dataclasses import replace
        cfg = replace(cfg, **over)
    prog = None if args.quiet else (lambda m: print(m, file=sys.stderr))
    res = run_experiment(cfg, workers=args.threads, progress=prog)
    paths = write_results(res, args.out_dir)
    if not args.quiet:
        for p in paths:
            print(p, file=sys.stderr)


def cmd_diagnose(args):
    sample = _unit_sample(args)
    fit = fit_reml_bhf(sample)
    rep = residual_diagnostics(fit, sample, args.bins)
    out = Path(args.out_dir)
    ids = rep.area_id
    write_csv(out / "residuals.csv", ["area_id", "residual", "u_hat"],
              ((ids[a], e, rep.u_hat[a]) for a, e in zip(rep.unit_area, rep.residuals)))
    write_csv(out / "qq.csv", ["theoretical", "empirical"], zip(rep.qq_theoretical, rep.qq_empirical))
    write_csv(out / "hist.csv", ["bin_lower", "bin_upper", "count"],
              ((rep.bin_edges[k], rep.bin_edges[k + 1], int(c)) for k, c in enumerate(rep.bin_counts)))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker processes (default ${ENV_THREADS} or 1); results do not depend on it")

    p = _Parser(prog="sae", description="Small area estimation of area means.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def unit_args(sp, required=True):
        sp.add_argument("--unit-csv", required=required, help="area_id,y,x1..,weight[,weight_cal][,N]")
        sp.add_argument("--sizes-csv", help="sidecar area_id,N file")

    s = sub.add_parser("calibrate", parents=[common], help="linear calibration of area weights")
    unit_args(s)
    s.add_argument("--targets-csv", required=True, help="area_id,total_1,..,total_p")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("direct", parents=[common], help="direct estimates and psi0 to an area CSV")
    unit_args(s)
    s.add_argument("--calibrated", action="store_true", help="use weight_cal")
    s.add_argument("--design", choices=DESIGNS, default="general")
    s.add_argument("--targets-csv", help="population totals; needed with base weights")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_direct)

    s = sub.add_parser("fit", parents=[common], help="REML fit report")
    s.add_argument("--model", choices=("fh", "fh-structured", "bhf"), required=True)
    s.add_argument("--area-csv")
    unit_args(s, required=False)
    s.add_argument("--structure", choices=("calibrated", "base", "srswor"), default="calibrated")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", parents=[common], help="area mean predictions")
    s.add_argument("--estimator", type=str.lower, choices=("dir", "fhd", "fha", "ua", "u", "yr"), required=True)
    s.add_argument("--area-csv")
    unit_args(s, required=False)
    s.add_argument("--targets-csv", help="population totals (population covariate means for yr)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("mse", parents=[common], help="MSE estimates")
    s.add_argument("--method", type=str.lower, choices=("pr", "pb", "pb1", "pbt", "pb2"), required=True)
    s.add_argument("--estimator", type=str.lower, choices=("fhd", "fha", "ua", "u", "yr"), required=True)
    s.add_argument("--area-csv")
    unit_args(s, required=False)
    s.add_argument("--targets-csv")
    s.add_argument("--structure", choices=("calibrated", "base", "srswor"),
                   help="psi_d structure (default: base for fha, calibrated otherwise)")
    s.add_argument("--pb-fit", choices=("area", "unit"), default="area",
                   help="data used to fit the bootstrap generating model")
    s.add_argument("--B", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mse)

    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo experiment")
    s.add_argument("--config", required=True, help=f"config file or bundled name ({', '.join(bundled_configs())})")
    s.add_argument("--L", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--B", type=int)
    s.add_argument("--L-true", dest="L_true", type=int)
    s.add_argument("--L-mse", dest="L_mse", type=int)
    s.add_argument("--out-dir", default=".")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("diagnose", parents=[common], help="unit-level residual diagnostics")
    unit_args(s)
    s.add_argument("--bins", type=int)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_diagnose)
    return p


def _format_warning(message, category, filename, lineno, line=None):
    return f"sae: warning: {message}\n"


def run(argv=None) -> int:
    warnings.formatwarning = _format_warning
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        args.func(args)
    except SAEError as exc:
        print(f"sae {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
