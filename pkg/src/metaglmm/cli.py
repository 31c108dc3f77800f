"""Command-line interface: ``metaglmm {fit,ci,simulate,reanalyze}``.

Exit codes: 0 on success, 1 for input errors, 2 when a fit does not converge.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from dataclasses import replace
from importlib import resources

from scipy.stats import norm

from .data import BUNDLED, DataError, Dataset, load_bundled, load_csv
from .family import FamilySpec
from .fit import ModelFit, fit_mle
from .inference import IntervalResult, Method, confidence_intervals
from .nn import dl_estimate, dl_regression, nn_input, nn_plbc_interval
from .qmc import DEFAULT_NODES, sobol_nodes
from .sim import ScenarioError, default_threads, emit_results, load_scenarios, run_scenario

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED = 0, 1, 2
ALL_METHODS = ("dl", "plbc", "pl", "plsbc")

log = logging.getLogger("metaglmm")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="metaglmm",
        description="Random-effects meta-analysis of aggregate data with GLMM likelihoods.",
        epilog="Environment: METAGLMM_THREADS sets the default for --threads.",
    )
    p.add_argument("command", choices=("fit", "ci", "simulate", "reanalyze"))
    p.add_argument("name", nargs="?", help="bundled dataset id for 'reanalyze' (e.g. long2020)")
    p.add_argument("--family", choices=("binomial", "poisson", "gamma", "normal"))
    p.add_argument("--data", metavar="PATH", help="aggregate-data CSV")
    p.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p.add_argument("--qmc-nodes", type=int, default=DEFAULT_NODES, metavar="B",
                   help=f"number of QMC nodes (default {DEFAULT_NODES})")
    p.add_argument("--seed", type=int, default=None, help="scramble seed for the QMC nodes")
    p.add_argument("--method", action="append", choices=(*ALL_METHODS, "all"),
                   help="interval method; repeat for several (default: pl and plsbc)")
    p.add_argument("--nn", action="store_true", help="add the normal-normal comparators (dl, plbc)")
    p.add_argument("--out", metavar="PATH", help="write results as CSV")
    p.add_argument("--threads", type=int, default=None, help="worker processes for 'simulate'")
    p.add_argument("--scenario", metavar="PATH", help="scenario file for 'simulate'")
    p.add_argument("--reps", type=int, default=None, help="override replications in 'simulate'")
    p.add_argument("--tau2-fixed", type=float, default=None, metavar="VALUE",
                   help="hold tau2 at VALUE instead of estimating it")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _f(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return f"{x:.3f}"


def _load(args) -> Dataset:
    if not args.data or not args.family:
        raise DataError("--data and --family are required")
    return load_csv(args.data, FamilySpec.from_name(args.family))


def _validate(args):
    if not 0.5 < args.level < 1.0:
        raise DataError("--level must lie in (0.5, 1)")
    if args.qmc_nodes < 64:
        raise DataError("--qmc-nodes must be at least 64")
    if args.tau2_fixed is not None and args.tau2_fixed < 0:
        raise DataError("--tau2-fixed must be non-negative")


def _fit(ds: Dataset, args) -> tuple[ModelFit, object]:
    nodes = sobol_nodes(args.qmc_nodes, args.seed)
    return fit_mle(ds, nodes, tau2_fixed=args.tau2_fixed), nodes


def _print_fit(ds: Dataset, fit: ModelFit, out=None):
    out = out or sys.stdout
    print(f"family: {ds.family.name}  records: {ds.K}  coefficients: {ds.p}  "
          f"QMC nodes: {fit.nodes_B}  seed: {fit.seed}", file=out)
    width = max(len(n) for n in (*ds.covariate_names, "log-likelihood"))
    for name, b in zip(ds.covariate_names, fit.beta_hat):
        print(f"  {name:<{width}}  {_f(b):>10}", file=out)
    print(f"  {'tau2':<{width}}  {_f(fit.tau2_hat):>10}", file=out)
    print(f"  {'log-likelihood':<{width}}  {_f(fit.loglik):>10}", file=out)
    status = "yes" if fit.converged else "NO"
    print(f"converged: {status} (iterations {fit.iterations}, gradient norm {fit.gradient_norm:.2e})", file=out)


def cmd_fit(args) -> int:
    ds = _load(args)
    fit, _ = _fit(ds, args)
    _print_fit(ds, fit)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "estimate"])
            for name, b in zip(ds.covariate_names, fit.beta_hat):
                w.writerow([name, repr(float(b))])
            w.writerow(["tau2", repr(fit.tau2_hat)])
            w.writerow(["loglik", repr(fit.loglik)])
            w.writerow(["converged", int(fit.converged)])
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def _methods(args) -> list[str]:
    chosen = args.method or ["pl", "plsbc"]
    if "all" in chosen:
        chosen = list(ALL_METHODS)
    if args.nn:
        chosen = [*chosen, "dl", "plbc"]
    return [m for m in ALL_METHODS if m in chosen]


def _row(name, label, ci: IntervalResult | None, est=None, lo=None, hi=None):
    if ci is not None:
        flags = ",".join(f.value for f in ci.boundary_flags)
        return [name, label, ci.estimate, ci.lower, ci.upper, ci.bartlett_C, flags]
    return [name, label, est, lo, hi, math.nan, "Converged,Converged"]


def _interval_rows(ds: Dataset, args, methods, indices=None):
    """Rows ``[coefficient, method, estimate, lower, upper, C, flags]`` and the fit."""
    rows = []
    fit = None
    indices = range(ds.p) if indices is None else indices
    if ds.two_arm:
        nn_targets = {1: None} if ds.p >= 2 else {}
    else:
        nn_targets = {j: j for j in indices}
    if any(m in methods for m in ("dl", "plbc")):
        inp = nn_input(ds)
        for j, col in nn_targets.items():
            if j not in indices:
                continue
            name = ds.covariate_names[j]
            if "dl" in methods:
                if inp.X.shape[1] == 1:
                    r = dl_estimate(inp)
                    lo, hi = r.ci(args.level)
                    rows.append(_row(name, "DL", None, r.theta, float(lo), float(hi)))
                else:
                    beta, _, cov = dl_regression(inp.theta_hat, inp.sigma2, inp.X)
                    z = norm.ppf(0.5 + args.level / 2)
                    se = math.sqrt(cov[col, col])
                    rows.append(_row(name, "DL", None, beta[col], beta[col] - z * se, beta[col] + z * se))
            if "plbc" in methods:
                ci = nn_plbc_interval(inp, args.level, index=col or 0)
                rows.append(_row(name, "PLBC", ci))
    glmm = [Method.PL if m == "pl" else Method.PLSBC for m in methods if m in ("pl", "plsbc")]
    if glmm:
        fit, nodes = _fit(ds, args)
        if not fit.converged:
            return rows, fit
        for j in indices:
            cis = confidence_intervals(ds, nodes, fit, j, args.level, glmm)
            for m in glmm:
                rows.append(_row(ds.covariate_names[j], m.value, cis[m]))
    return rows, fit


def _print_rows(rows, out=None):
    out = out or sys.stdout
    header = ["coefficient", "method", "estimate", "lower", "upper", "C", "flags"]
    width = max([len(header[0])] + [len(r[0]) for r in rows])
    print(f"{header[0]:<{width}}  {'method':<6} {'estimate':>9} {'lower':>9} {'upper':>9} {'C':>7}  flags", file=out)
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:<6} {_f(r[2]):>9} {_f(r[3]):>9} {_f(r[4]):>9} {_f(r[5]):>7}  {r[6]}", file=out)


def _write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["coefficient", "method", "estimate", "lower", "upper", "C", "flags"])
        for r in rows:
            w.writerow([r[0], r[1], *(repr(float(v)) for v in r[2:6]), r[6]])


def cmd_ci(args) -> int:
    ds = _load(args)
    rows, fit = _interval_rows(ds, args, _methods(args))
    _print_rows(rows)
    if args.out:
        _write_rows(rows, args.out)
    if fit is not None and not fit.converged:
        print("GLMM fit did not converge; profile intervals skipped", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_reanalyze(args) -> int:
    if args.name not in BUNDLED:
        print(f"unknown dataset {args.name!r}; bundled datasets: {', '.join(sorted(BUNDLED))}", file=sys.stderr)
        return EXIT_INPUT
    ds = load_bundled(args.name)
    methods = _methods(args) if args.method else list(ALL_METHODS)
    index = 1 if ds.two_arm else 0
    rows, fit = _interval_rows(ds, args, methods, indices=[index])
    print(f"reanalysis of {args.name}: {ds.family.name} outcome, {ds.K} records, "
          f"coefficient '{ds.covariate_names[index]}', {args.level:.0%} intervals")
    _print_rows(rows)
    if args.out:
        _write_rows(rows, args.out)
    if fit is not None and not fit.converged:
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.scenario:
        specs = load_scenarios(args.scenario)
    else:
        ref = resources.files("metaglmm.scenarios").joinpath("desk.ini")
        with resources.as_file(ref) as path:
            specs = load_scenarios(path)
    if args.reps is not None:
        if args.reps < 1:
            raise ScenarioError("--reps must be at least 1")
        specs = [replace(s, replications=args.reps) for s in specs]
    threads = args.threads or default_threads()
    summaries = []
    for spec in specs:
        summary = run_scenario(spec, threads)
        summaries.append(summary)
        print(f"[{spec.name}] {spec.family} K={spec.K} tau2={spec.tau2} reps={spec.replications}")
        for m, s in summary.methods.items():
            print(f"  {m:<7} bias {_f(s.bias):>7}  coverage {_f(s.coverage):>6}  "
                  f"length {_f(s.length):>7}  failures {s.failures}")
    if args.out:
        emit_results(summaries, args.out)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "ci": cmd_ci, "simulate": cmd_simulate, "reanalyze": cmd_reanalyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        if args.command == "reanalyze" and not args.name:
            raise DataError(f"reanalyze needs a dataset id; bundled: {', '.join(sorted(BUNDLED))}")
        return COMMANDS[args.command](args)
    except (DataError, ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
