"""Command-line interface: simulate, fit, subsample, benchmark, calibrate.

Exit codes: 0 success, 2 usage error, 3 numerical failure.  All outputs are
machine-readable (JSON reports carry ``"schema": 1``); every subcommand is
deterministic given ``--seed``, and ``--threads k`` reproduces the serial
result exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time as _time

import numpy as np

from . import simulation, subsampling
from .breslow import breslow_cumhaz
from .data import CsvSchema, load_csv, write_csv
from .errors import CoxSubError
from .partial_likelihood import CoxFit, newton_solve, score
from .simulation import SimConfig, gen_dataset, resolve_c0, run_replications

SCHEMA_VERSION = 1
DEFAULT_SEED = 1729  # fixed so repeated invocations reproduce byte-identical output
_CACHE_PATH = os.path.join(os.path.expanduser("~"), ".cache", "coxsub", "c0_cache.json")


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("COXSUB_THREADS", "1")))
    except ValueError:
        return 1


def _parse_floats(text, p: int | None = None) -> np.ndarray:
    if isinstance(text, (list, tuple)):
        vals = np.asarray([float(v) for v in text])
    else:
        vals = np.asarray([float(v) for v in str(text).split(",") if v != ""])
    if p is not None and vals.size == 1 and p > 1:
        vals = np.full(p, vals[0])
    return vals


def _emit(report: dict, out: str | None, fmt: str) -> None:
    if fmt == "csv":
        flat = _flatten(report)
        text = ",".join(flat.keys()) + "\n" + ",".join(str(v) for v in flat.values()) + "\n"
    else:
        text = json.dumps(report, indent=2, default=_json_default) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, f"{key}."))
        elif isinstance(v, (list, tuple, np.ndarray)):
            for i, item in enumerate(v):
                out[f"{key}.{i}"] = item
        else:
            out[key] = v
    return out


def _schema_from_args(args) -> CsvSchema:
    covs = None
    if args.covariates is not None:
        names = [c for c in str(args.covariates).split(",") if c != ""]
        if not names:
            args._parser.error("--covariates: empty covariate list")
        covs = tuple(names)
    return CsvSchema(
        time_column=args.time_col,
        status_column=args.status_col,
        covariate_columns=covs,
        delimiter=args.delimiter,
        has_header=not args.no_header,
    )


def _check(cond, parser, message):
    if not cond:
        parser.error(message)


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    p = args._parser
    _check(0.0 < args.cr < 1.0, p, "--cr must lie in (0, 1)")
    _check(args.n >= 1, p, "--n must be at least 1")
    beta = _parse_floats(args.beta) if args.beta is not None else np.asarray(simulation.DEFAULT_BETA)
    cfg = SimConfig(
        case=args.case,
        n=args.n,
        beta_true=tuple(beta),
        target_cr=args.cr,
        c0=args.c0,
        seed=args.seed,
    )
    cfg = resolve_c0(cfg, cache_path=_CACHE_PATH)
    ds = gen_dataset(cfg, np.random.default_rng(np.random.SeedSequence(cfg.seed)))
    write_csv(ds, args.output)
    sidecar = {
        "schema": SCHEMA_VERSION,
        "case": cfg.case,
        "n": cfg.n,
        "target_cr": cfg.target_cr,
        "empirical_cr": ds.censoring_rate,
        "c0": cfg.c0,
        "beta_true": list(cfg.beta_true),
        "seed": cfg.seed,
    }
    with open(args.output + ".meta.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    print(f"wrote {ds.n} records to {args.output} (empirical CR {ds.censoring_rate:.4f})")
    return 0


# ---------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    ds = load_csv(args.input, _schema_from_args(args))
    t0 = _time.perf_counter()
    if args.fix_beta is not None:
        beta = _parse_floats(args.fix_beta, p=ds.p)
        if beta.shape != (ds.p,):
            args._parser.error(f"--fix-beta needs 1 or {ds.p} values")
        from .partial_likelihood import hessian, neg_log_partial_likelihood

        fit = CoxFit(
            beta=beta,
            role="full_mpl",
            converged=True,
            iterations=0,
            final_score_norm=float(np.abs(score(ds, beta)).max()),
            neg_logpl=neg_log_partial_likelihood(ds, beta),
            hessian=hessian(ds, beta),
        )
    else:
        fit = newton_solve(ds)
    wall = _time.perf_counter() - t0
    if not fit.converged:
        sys.stderr.write(
            f"fit did not converge: iterations={fit.iterations} "
            f"score_norm={fit.final_score_norm:.3e}\n"
        )
        return 3
    if args.baseline_out:
        breslow_cumhaz(ds, fit.beta).write_csv(args.baseline_out)
    report = {
        "schema": SCHEMA_VERSION,
        "n": ds.n,
        "p": ds.p,
        "n_events": ds.n_events,
        "beta": fit.beta,
        "se": fit.standard_errors(ds.n),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "score_norm": fit.final_score_norm,
        "neg_logpl": fit.neg_logpl,
        "wall_time_s": wall,
    }
    _emit(report, args.output, args.format)
    return 0


# ---------------------------------------------------------------- subsample


def cmd_subsample(args) -> int:
    p = args._parser
    _check(args.r0 >= 1, p, "--r0 must be at least 1")
    _check(args.r >= 1, p, "--r must be at least 1")
    _check(0.0 <= args.delta <= 1.0, p, "--delta must lie in [0, 1]")
    _check(args.reps >= 1, p, "--reps must be at least 1")
    ds = load_csv(args.input, _schema_from_args(args))
    root = np.random.SeedSequence(args.seed)
    streams = root.spawn(args.reps)
    runs = []
    for s in streams:
        res = subsampling.two_step(ds, args.r0, args.r, args.delta, args.criterion, np.random.default_rng(s))
        if res.covariance is None:
            sys.stderr.write("two-step fit did not converge\n")
            return 3
        runs.append(res)
    first = runs[0]
    if args.plan_out:
        first.plan.write_csv(args.plan_out, status=ds.status)
    summary = simulation.five_number_summary(first.plan, ds.status)
    est = first.fit.beta
    se = first.covariance.standard_errors
    report = {
        "schema": SCHEMA_VERSION,
        "criterion": args.criterion,
        "r0": args.r0,
        "r": args.r,
        "delta": args.delta,
        "seed": args.seed,
        "est": est,
        "se": se,
        "ci_lower": est - 1.96 * se,
        "ci_upper": est + 1.96 * se,
        "iterations": first.fit.iterations,
        "timings": first.timings,
        "plan_five_number": {
            "censored": list(summary.censored),
            "uncensored": list(summary.uncensored),
        },
    }
    if args.reps > 1:
        ref = newton_solve(ds)
        ests = np.asarray([r.fit.beta for r in runs])
        ses = np.asarray([r.covariance.standard_errors for r in runs])
        report["reps"] = args.reps
        report["reference_beta"] = ref.beta
        report["bias"] = ests.mean(axis=0) - ref.beta
        report["ese"] = ests.std(axis=0, ddof=1)
        report["mean_se"] = ses.mean(axis=0)
        report["mse"] = float(np.mean(np.sum((ests - ref.beta) ** 2, axis=1)))
    _emit(report, args.output, args.format)
    return 0


# ---------------------------------------------------------------- benchmark


def cmd_benchmark(args) -> int:
    p = args._parser
    cases = [c.strip().upper() for c in args.cases.split(",") if c.strip()]
    _check(bool(cases), p, "--cases must name at least one case")
    r_grid = [int(v) for v in str(args.r_grid).split(",") if v != ""]
    delta_grid = [float(v) for v in str(args.delta_grid).split(",") if v != ""]
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    _check(all(r >= 1 for r in r_grid), p, "--r-grid entries must be positive")
    _check(all(0.0 <= d <= 1.0 for d in delta_grid), p, "--delta-grid entries must lie in [0, 1]")
    _check(args.reps >= 2, p, "--reps must be at least 2")
    os.makedirs(args.out_dir, exist_ok=True)

    rows = []
    for case in cases:
        cfg = SimConfig(case=case, n=args.n, target_cr=args.cr, seed=args.seed)
        for method in methods:
            for r in r_grid:
                for delta in delta_grid:
                    cell = dict(
                        case=case, cr=args.cr, method=method, mode=args.mode,
                        r0=args.r0, r=r, delta=delta, n=args.n, reps=args.reps,
                    )
                    try:
                        rep = run_replications(
                            cfg,
                            method,
                            r0=args.r0,
                            r=r,
                            delta=delta,
                            n_reps=args.reps,
                            seed=args.seed,
                            mode=args.mode,
                            threads=args.threads,
                            cache_path=_CACHE_PATH,
                        )
                        cell.update(
                            mse=rep.mse,
                            bias_b1=rep.bias[0],
                            ese_b1=rep.ese[0],
                            se_b1=rep.mean_se[0],
                            cp_b1=rep.coverage[0],
                            failures=rep.n_failures,
                            error="",
                        )
                    except CoxSubError as exc:
                        cell.update(
                            mse="", bias_b1="", ese_b1="", se_b1="", cp_b1="",
                            failures="", error=str(exc),
                        )
                    rows.append(cell)
                    print(
                        f"case {case} method {method} r={r} delta={delta}: "
                        f"mse={cell['mse']}" + (f" ERROR {cell['error']}" if cell["error"] else "")
                    )
    table_path = os.path.join(args.out_dir, "replications.csv")
    with open(table_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    timing_path = os.path.join(args.out_dir, "timing.csv")
    _timing_table(args, cases[0], max(r_grid), timing_path)
    print(f"wrote {table_path} and {timing_path}")
    return 0


def _timing_table(args, case: str, r: int, path: str) -> None:
    """Wall-clock comparison: full-data solve vs one two-step run."""
    cfg = resolve_c0(
        SimConfig(case=case, n=args.timing_n, target_cr=args.cr, seed=args.seed),
        cache_path=_CACHE_PATH,
    )
    root = np.random.SeedSequence(cfg.seed)
    data_seq, warm_seq, sub_seq = root.spawn(3)
    ds = gen_dataset(cfg, np.random.default_rng(data_seq))
    # warm-up on a slice so first-use overheads stay out of the comparison
    warm = SimConfig(case=case, n=5000, target_cr=args.cr, seed=cfg.seed, c0=cfg.c0)
    ds_warm = gen_dataset(warm, np.random.default_rng(warm_seq))
    newton_solve(ds_warm)
    subsampling.two_step(ds_warm, args.r0, min(r, 1000), 0.1, "lopt", np.random.default_rng(warm_seq))

    t0 = _time.perf_counter()
    newton_solve(ds)
    full_wall = _time.perf_counter() - t0
    t0 = _time.perf_counter()
    res = subsampling.two_step(ds, args.r0, r, 0.1, "lopt", np.random.default_rng(sub_seq))
    two_wall = _time.perf_counter() - t0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "full_fit_s", "two_step_s", "speedup", *sorted(res.timings)])
        writer.writerow(
            [
                ds.n,
                f"{full_wall:.4f}",
                f"{two_wall:.4f}",
                f"{full_wall / two_wall:.2f}",
                *(f"{res.timings[k]:.4f}" for k in sorted(res.timings)),
            ]
        )


# ---------------------------------------------------------------- calibrate


def cmd_calibrate(args) -> int:
    p = args._parser
    _check(0.01 < args.cr < 0.99, p, "--cr must lie in (0.01, 0.99)")
    beta = _parse_floats(args.beta) if args.beta is not None else np.asarray(simulation.DEFAULT_BETA)
    c0 = simulation.calibrate_c0(
        args.case, beta, args.cr, seed=args.seed, tol=args.tol, cache_path=_CACHE_PATH
    )
    check_rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(2)[1])
    X = simulation.gen_covariates(args.case, 100_000, check_rng, p=beta.size)
    t_fail = simulation.gen_failure_times(X, beta, check_rng)
    achieved = float(np.mean(t_fail > c0 * check_rng.random(100_000)))
    report = {
        "schema": SCHEMA_VERSION,
        "case": str(args.case).upper(),
        "target_cr": args.cr,
        "c0": c0,
        "achieved_cr": achieved,
        "seed": args.seed,
    }
    _emit(report, args.output, "json")
    return 0


# ---------------------------------------------------------------- wiring


def _add_common(sub, io_input=False):
    sub.add_argument("--seed", type=int, default=DEFAULT_SEED, help="RNG seed (default %(default)s)")
    sub.add_argument("--threads", type=int, default=_default_threads(),
                     help="worker processes for replications (env COXSUB_THREADS)")
    sub.add_argument("--config", help="JSON file with flag defaults (flags win)")
    if io_input:
        sub.add_argument("-i", "--input", required=True, help="dataset CSV path")
        sub.add_argument("--time-col", default="time")
        sub.add_argument("--status-col", default="status")
        sub.add_argument("--covariates", default=None,
                         help="comma-separated covariate columns (default: all others)")
        sub.add_argument("--delimiter", default=",")
        sub.add_argument("--no-header", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="coxsub",
        description="Proportional-hazards fitting on massive survival data via two-step subsampling.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    sim = commands.add_parser("simulate", help="generate a synthetic dataset CSV")
    sim.add_argument("--case", default="I", choices=["I", "II", "III", "IV"])
    sim.add_argument("--n", type=int, default=100_000)
    sim.add_argument("--cr", type=float, default=0.2, help="target censoring rate")
    sim.add_argument("--c0", type=float, default=None, help="censoring bound (skips calibration)")
    sim.add_argument("--beta", default=None, help="true coefficients, comma-separated")
    sim.add_argument("-o", "--output", required=True)
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate)
    subparsers["simulate"] = sim

    fit = commands.add_parser("fit", help="full-data maximum partial likelihood fit")
    fit.add_argument("--fix-beta", default=None, help="evaluate at fixed coefficients instead of solving")
    fit.add_argument("--baseline-out", default=None, help="write cumulative baseline hazard CSV")
    fit.add_argument("-o", "--output", default=None, help="report path (default stdout)")
    fit.add_argument("--format", choices=["json", "csv"], default="json")
    _add_common(fit, io_input=True)
    fit.set_defaults(func=cmd_fit)
    subparsers["fit"] = fit

    ss = commands.add_parser("subsample", help="two-step subsample estimate with standard errors")
    ss.add_argument("--r0", type=int, default=300, help="pilot subsample size")
    ss.add_argument("--r", type=int, default=1000, help="second-stage subsample size")
    ss.add_argument("--delta", type=float, default=0.1, help="uniform mixing rate")
    ss.add_argument("--criterion", choices=["lopt", "aopt", "unif"], default="lopt")
    ss.add_argument("--reps", type=int, default=1,
                    help="repeat the procedure and report spread vs the full-data fit")
    ss.add_argument("--plan-out", default=None,
                    help="write per-record selection probabilities to CSV")
    ss.add_argument("-o", "--output", default=None)
    ss.add_argument("--format", choices=["json", "csv"], default="json")
    _add_common(ss, io_input=True)
    ss.set_defaults(func=cmd_subsample)
    subparsers["subsample"] = ss

    bench = commands.add_parser("benchmark", help="replication study over a parameter grid")
    bench.add_argument("--cases", default="I")
    bench.add_argument("--n", type=int, default=100_000)
    bench.add_argument("--cr", type=float, default=0.2)
    bench.add_argument("--r0", type=int, default=300)
    bench.add_argument("--r-grid", default="400,600,800,1000")
    bench.add_argument("--delta-grid", default="0.1")
    bench.add_argument("--methods", default="lopt,unif")
    bench.add_argument("--reps", type=int, default=200)
    bench.add_argument("--mode", choices=["fixed", "fresh"], default="fixed")
    bench.add_argument("--timing-n", type=int, default=1_000_000,
                       help="dataset size for the wall-clock comparison")
    bench.add_argument("--out-dir", required=True)
    _add_common(bench)
    bench.set_defaults(func=cmd_benchmark)
    subparsers["benchmark"] = bench

    cal = commands.add_parser("calibrate", help="find the censoring bound for a target rate")
    cal.add_argument("--case", default="I", choices=["I", "II", "III", "IV"])
    cal.add_argument("--cr", type=float, required=True)
    cal.add_argument("--beta", default=None)
    cal.add_argument("--tol", type=float, default=0.002)
    cal.add_argument("-o", "--output", default=None)
    _add_common(cal)
    cal.set_defaults(func=cmd_calibrate)
    subparsers["calibrate"] = cal

    return parser, subparsers


def main(argv=None) -> int:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    sub = subparsers[args.command]
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"--config: {exc}")
        allowed = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = set(config) - allowed
        if unknown:
            sub.error(f"--config: unknown keys {sorted(unknown)}")
        sub.set_defaults(**config)
        args = parser.parse_args(argv)
    args._parser = sub
    try:
        return args.func(args)
    except CoxSubError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())
