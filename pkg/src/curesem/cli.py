"""Command-line front end: ``curesem fit | simulate | diagnose``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure
(a diagnostic JSON object is written to stdout).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import band_coverage, fitted_curves, kaplan_meier, ks_normal_test, quantile_residuals
from .distributions import DEFAULT_SEED, DomainError, RngStream
from .estimators import (
    EmConfig,
    FitError,
    McemConfig,
    SemConfig,
    cure_rate_inference,
    fit_dm,
    fit_em,
    fit_mcem,
    fit_sem,
    initial_values,
)
from .likelihood import NumericError
from .model import CureData, Params, cure_rate
from .optimize import OptimizationError
from .simulation import ALGORITHMS, Scenario, ScenarioError, run_study

SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


class DatasetError(ValueError):
    pass


# --- I/O ---------------------------------------------------------------------

def read_dataset(path) -> CureData:
    """Parse a dataset CSV.

    Required columns are ``time`` and ``status``; ``x_*`` columns enter the
    lifetime design and ``z_*`` columns the cure design, each after an
    intercept.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"{path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        for col in ("time", "status"):
            if col not in header:
                raise DatasetError(f"{path}: missing required column '{col}'")
        if len(set(header)) != len(header):
            raise DatasetError(f"{path}: duplicate column names in header")
        xcols = [h for h in header if h.startswith("x_")]
        zcols = [h for h in header if h.startswith("z_")]
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{line_no}: expected {len(header)} fields, found {len(row)}")
            rec = {}
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell.upper() in ("NA", "NAN"):
                    raise DatasetError(f"{path}:{line_no}: missing value in column '{name}'")
                try:
                    rec[name] = float(cell)
                except ValueError:
                    raise DatasetError(f"{path}:{line_no}: column '{name}' is not numeric: {cell!r}") from None
            if not rec["time"] > 0:
                raise DatasetError(f"{path}:{line_no}: time must be positive")
            if rec["status"] not in (0.0, 1.0):
                raise DatasetError(f"{path}:{line_no}: status must be 0 or 1")
            if not all(math.isfinite(v) for v in rec.values()):
                raise DatasetError(f"{path}:{line_no}: non-finite value")
            rows.append(rec)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    n = len(rows)
    t = np.array([r["time"] for r in rows])
    d = np.array([int(r["status"]) for r in rows])
    x = np.column_stack([np.ones(n)] + [[r[c] for r in rows] for c in xcols])
    z = np.column_stack([np.ones(n)] + [[r[c] for r in rows] for c in zcols])
    return CureData(t, d, x, z, x_names=["intercept"] + xcols, z_names=["intercept"] + zcols)


def _num(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_num(u) for u in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_num(u) for u in v]
    if isinstance(v, dict):
        return {k: _num(u) for k, u in v.items()}
    return v


def dump_json(obj, path=None):
    # repr-based float output round-trips exactly (up to 17 significant digits)
    text = json.dumps(_num(obj), indent=2) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _env_seed(default=DEFAULT_SEED) -> int:
    raw = os.environ.get("CURESEM_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CURESEM_SEED must be an integer, got {raw!r}") from None


def params_from_report(report: dict, data: CureData | None = None) -> Params:
    """Rebuild :class:`Params` from a FitReport (or a plain estimates mapping)."""
    est = report.get("estimates", report)
    if data is not None and "columns" in report:
        cols = report["columns"]
        have = set(data.x_names) | set(data.z_names)
        for name in cols.get("x", []) + cols.get("z", []):
            if name not in have:
                raise DatasetError(f"fit uses covariate '{name}', which is missing from the data")
        for key, names in (("x", data.x_names), ("z", data.z_names)):
            if cols.get(key) is not None and list(cols[key]) != list(names):
                raise DatasetError(f"{key} design columns {names} do not match the fit's {cols[key]}")
    try:
        alpha = [est[f"alpha{j}"] for j in range(sum(k.startswith("alpha") for k in est))]
        beta = [est[f"beta{j}"] for j in range(sum(k.startswith("beta") for k in est))]
        return Params(phi=est["phi"], alpha=alpha, beta=beta, gamma1=est["gamma1"])
    except KeyError as exc:
        raise DatasetError(f"parameter {exc.args[0]!r} missing from estimates") from None


def _parse_grid(spec: str):
    try:
        lo, hi, step = (float(v) for v in spec.split(":"))
    except ValueError:
        raise UsageError(f"--phi-grid must be lo:hi:step, got {spec!r}") from None
    if not (0 < lo <= hi and step > 0):
        raise UsageError("--phi-grid needs 0 < lo <= hi and step > 0")
    k = int(math.floor((hi - lo) / step + 1e-9))
    return tuple(round(lo + i * step, 10) for i in range(k + 1))


def _parse_profile(spec: str, data: CureData):
    body = spec.split("=", 1)[1] if "=" in spec else spec
    try:
        vals = [float(v) for v in body.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --cure-profile {spec!r}") from None
    q = data.z.shape[1]
    if len(vals) == q - 1:
        vals = [1.0] + vals
    if len(vals) != q:
        raise UsageError(f"--cure-profile needs {q - 1} covariate values (or {q} with intercept), got {len(vals)}")
    return np.array(vals)


# --- commands ------------------------------------------------------------------

def _default_init(data: CureData) -> Params:
    return Params(phi=1.0, alpha=np.zeros(data.x.shape[1]), beta=np.zeros(data.z.shape[1]), gamma1=1.0)


def _load_init(arg, data: CureData) -> Params:
    if arg == "auto":
        return initial_values(data, fallback=_default_init(data))
    try:
        report = json.loads(Path(arg).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read --init file {arg}: {exc}") from None
    p = params_from_report(report)
    data.check_params(p)
    return p


def cmd_fit(args) -> int:
    algo = args.algo
    if args.phi_grid is not None and algo != "em":
        raise UsageError("--phi-grid applies only to --algo em")
    if algo != "sem" and (args.iters is not None or args.burnin is not None or args.mle_rule is not None):
        raise UsageError("--iters/--burnin/--mle-rule apply only to --algo sem")
    if args.mc_samples is not None and algo != "mcem":
        raise UsageError("--mc-samples applies only to --algo mcem")
    if args.eps is not None and algo not in ("em", "mcem"):
        raise UsageError("--eps applies only to --algo em or mcem")
    if args.eps is not None and not args.eps > 0:
        raise UsageError("--eps must be positive")
    seed = args.seed if args.seed is not None else _env_seed()
    data = read_dataset(args.data)
    init = _load_init(args.init, data)
    profiles = [_parse_profile(p, data) for p in args.cure_profile] if args.cure_profile else _group_profiles(data)

    config: dict = {"algo": algo, "init": args.init, "data": str(args.data)}
    if algo == "sem":
        cfg = SemConfig(
            total_iters=args.iters if args.iters is not None else 1500,
            burn_in=args.burnin if args.burnin is not None else 500,
            mle_rule=args.mle_rule or "max-loglik",
            rng=RngStream(seed, 0),
        )
        config.update(iters=cfg.total_iters, burnin=cfg.burn_in, mle_rule=cfg.mle_rule)
        fitter = lambda: fit_sem(data, init, cfg)  # noqa: E731
    elif algo == "em":
        kw = {"eps": args.eps} if args.eps is not None else {}
        cfg = EmConfig(phi_grid=_parse_grid(args.phi_grid or "0.1:10:0.1"), **kw)
        config.update(phi_grid=args.phi_grid or "0.1:10:0.1", eps=cfg.eps, max_iters=cfg.max_iters,
                      warm_start=cfg.warm_start)
        fitter = lambda: fit_em(data, init, cfg)  # noqa: E731
    elif algo == "dm":
        config.update(optimizer="nelder-mead")
        fitter = lambda: fit_dm(data, init)  # noqa: E731
    else:
        kw = {"eps": args.eps} if args.eps is not None else {}
        cfg = McemConfig(mc_samples=args.mc_samples or 500, rng=RngStream(seed, 1), **kw)
        config.update(mc_samples=cfg.mc_samples, eps=cfg.eps, lag=cfg.lag, window=cfg.window,
                      max_iters=cfg.max_iters)
        fitter = lambda: fit_mcem(data, init, cfg)  # noqa: E731

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fitter()
    except (FitError, OptimizationError, NumericError) as exc:
        diag = {"schema": SCHEMA, "error": type(exc).__name__, "message": str(exc), "algorithm": algo,
                "seed": seed, "config": config, "init": init.as_dict()}
        if isinstance(exc, FitError):
            diag["diagnostics"] = exc.diagnostics
        if isinstance(exc, OptimizationError) and exc.best is not None:
            best = exc.best
            diag["best"] = best.as_dict() if isinstance(best, Params) else np.asarray(best).tolist()
        dump_json(diag)
        print(f"curesem: fit failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    report = build_report(fit, data, profiles, seed, config, init, timing=not args.no_timing)
    dump_json(report, args.out)
    return EXIT_OK


def _group_profiles(data: CureData, limit: int = 10):
    rows = np.unique(data.z, axis=0)
    return list(rows) if len(rows) <= limit else []


def build_report(fit, data: CureData, profiles, seed, config, init: Params, timing=True) -> dict:
    names = fit.names
    cure = []
    if fit.cov is not None:
        for c in cure_rate_inference(fit, profiles):
            cure.append({"profile": c.profile, "estimate": c.estimate, "se": c.se, "ci95": list(c.ci95)})
    else:
        for z in profiles:
            cure.append({"profile": z, "estimate": float(cure_rate(fit.params.phi, math.exp(z @ fit.params.beta))),
                         "se": None, "ci95": None})
    ci = fit.ci95
    report = {
        "schema": SCHEMA,
        "version": __version__,
        "algorithm": fit.algorithm,
        "n": len(data),
        "estimates": dict(zip(names, fit.estimates)),
        "se": dict(zip(names, fit.se)) if fit.se is not None else None,
        "ci95": {k: list(v) for k, v in zip(names, ci)} if ci is not None else None,
        "loglik": fit.loglik,
        "converged": fit.converged,
        "boundary": fit.boundary,
        "cure_rates": cure,
        "runtime_seconds": fit.wall_time if timing else None,
        "seed": seed,
        "config": config,
        "init": init.as_dict(),
        "columns": {"x": data.x_names, "z": data.z_names},
    }
    if fit.algorithm == "em":
        report["profile"] = [{"phi": p["phi"], "loglik": p["loglik"], "converged": p["converged"]}
                             for p in fit.info["profile"]]
    if fit.algorithm == "sem":
        report["sem"] = {"best_iteration": fit.info["best_iteration"],
                         "mean_rule_estimates": fit.info["mean_params"].as_dict(),
                         "maxll_rule_estimates": fit.info["maxll_params"].as_dict(),
                         "mstep_failures": fit.info["mstep_failures"]}
    if fit.algorithm == "mcem":
        report["mcem"] = {"iterations": fit.info["iterations"]}
    return report


def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    return f"{v:.6f}"


def write_tsv(path, header, rows, comments=()):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(r[0:1] + [_fmt(v) for v in r[1:]]) + "\n")


def cmd_simulate(args) -> int:
    try:
        spec = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read scenario {args.scenario}: {exc}") from None
    if not isinstance(spec, dict):
        raise UsageError("scenario file must hold a JSON object")
    if args.seed is not None:
        spec["seed"] = args.seed
    elif "seed" not in spec:
        spec["seed"] = _env_seed()
    try:
        scenario = Scenario.from_dict(spec)
    except TypeError as exc:
        raise UsageError(f"invalid scenario: {exc}") from None
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    bad = [a for a in algos if a not in ALGORITHMS]
    if bad or not algos:
        raise UsageError(f"--algos must be a comma list drawn from {','.join(ALGORITHMS)}")
    reps = args.replicates if args.replicates is not None else scenario.replicates
    if reps < 1 or args.jobs < 1:
        raise UsageError("--replicates and --jobs must be >= 1")
    summaries, records = run_study(scenario, algos, replicates=reps, jobs=args.jobs)
    prefix = args.out_prefix
    header = ["parameter", "truth", "estimate", "mean_se", "bias", "rmse", "cp95"]
    for a, s in summaries.items():
        comments = [f"algorithm={a} replicates={reps} ok={s.n_ok} failed={s.n_failed} no_se={s.n_no_se}",
                    f"seed={scenario.seed}"]
        write_tsv(f"{prefix}_{a}.tsv", header, [list(r) for r in s.param_rows()], comments)
        write_tsv(f"{prefix}_{a}_cure.tsv", header, [list(r) for r in s.cure_rows()], comments)
    with open(f"{prefix}_cpu.tsv", "w", encoding="utf-8") as fh:
        fh.write("algorithm\treplicates\tcpu_seconds_total\tcpu_seconds_mean\n")
        for a, s in summaries.items():
            fh.write(f"{a}\t{reps}\t{_fmt(s.cpu_seconds)}\t{_fmt(s.cpu_seconds / reps)}\n")
    if args.no_timing:
        for r in records:
            r["cpu_seconds"] = {k: None for k in r["cpu_seconds"]}
    dump_json({"schema": SCHEMA, "scenario": scenario.to_dict(), "algorithms": algos, "replicates": reps,
               "jobs": args.jobs, "records": records}, f"{prefix}_raw.json")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    try:
        report = json.loads(Path(args.fit).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read fit report {args.fit}: {exc}") from None
    data = read_dataset(args.data)
    params = params_from_report(report, data)
    seed = args.seed if args.seed is not None else _env_seed()
    if args.group_by is None:
        col = 1 if data.z.shape[1] > 1 else None
    else:
        if args.group_by not in data.z_names:
            raise DatasetError(f"group-by covariate '{args.group_by}' is missing from the data")
        col = data.z_names.index(args.group_by)
    curves = kaplan_meier(data, col)
    fitted = fitted_curves(data, params, curves, col)
    res = quantile_residuals(data, params, RngStream(seed, 3), replicates=args.replicates)
    d_stat, p_val = ks_normal_test(res.residuals)
    prefix = args.out_prefix
    with open(f"{prefix}_km.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "time", "surv", "lower95", "upper95", "n_at_risk", "n_events"])
        for c in curves:
            for row in zip(c.times, c.surv, c.lower, c.upper, c.n_at_risk, c.n_events):
                w.writerow([_g(c.group)] + [repr(float(v)) for v in row[:4]] + [int(row[4]), int(row[5])])
    with open(f"{prefix}_fitted.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "time", "surv"])
        for g, ts, ss in fitted:
            for t, s in zip(ts, ss):
                w.writerow([_g(g), repr(float(t)), repr(float(s))])
    per_subject = np.median(res.draws, axis=0)
    with open(f"{prefix}_residuals.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "residual"])
        for i, r in enumerate(per_subject):
            w.writerow([i, repr(float(r))])
    with open(f"{prefix}_qq.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "residual"])
        for i, r in enumerate(res.residuals, start=1):
            w.writerow([i, repr(float(r))])
    coverage = {_g(c.group): band_coverage(c, s) for c, (_, _, s) in zip(curves, fitted)}
    dump_json({"schema": SCHEMA, "D": d_stat, "p": p_val, "n": len(data), "replicates": args.replicates,
               "seed": seed, "fit": str(args.fit), "band_coverage": coverage}, f"{prefix}_ks.json")
    return EXIT_OK


def _g(group):
    if group is None:
        return "all"
    return str(int(group)) if float(group).is_integer() else repr(float(group))


# --- entry point -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="curesem", description="Negative binomial cure rate model fitting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--algo", choices=ALGORITHMS, default="sem")
    f.add_argument("--iters", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--mle-rule", choices=("mean", "max-loglik"))
    f.add_argument("--phi-grid")
    f.add_argument("--mc-samples", type=int)
    f.add_argument("--eps", type=float, help="EM/MCEM relative tolerance")
    f.add_argument("--seed", type=int)
    f.add_argument("--init", default="auto", help="'auto' or a JSON file with estimates")
    f.add_argument("--cure-profile", action="append", help="z=v1,v2,... (repeatable)")
    f.add_argument("--out", help="output JSON path (default stdout)")
    f.add_argument("--no-timing", action="store_true", help="omit wall time so reports are byte-stable")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a Monte Carlo study")
    s.add_argument("--scenario", required=True)
    s.add_argument("--algos", default="sem")
    s.add_argument("--replicates", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-prefix", required=True)
    s.add_argument("--no-timing", action="store_true", help="blank CPU times in the raw JSON")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="export goodness-of-fit data")
    d.add_argument("--fit", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out-prefix", required=True)
    d.add_argument("--seed", type=int)
    d.add_argument("--replicates", type=int, default=5)
    d.add_argument("--group-by", help="z_ column used to stratify the KM curves")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"curesem: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ScenarioError, DomainError, ValueError) as exc:
        print(f"curesem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        dump_json({"schema": SCHEMA, "error": type(exc).__name__, "message": str(exc)})
        print(f"curesem: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
