"""Simulation harness: bias, coverage and interval length of the competing methods.

Every replication draws from its own counter-based stream, keyed by
``(seed, replication)``, so serial and parallel runs agree exactly.
"""

from __future__ import annotations

import configparser
import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import special

from .data import Dataset, StudyRecord
from .family import FamilySpec, Kind
from .fit import fit_mle
from .inference import Method, confidence_intervals
from .nn import dl_estimate, link_scale_input, nn_plbc_interval
from .qmc import sobol_nodes

METHODS = ("ndl", "nplbc", "gpl", "gplsbc")
METRICS = ("bias", "coverage", "length")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    family: str
    K: int
    tau2: float
    theta0: float = -2.0
    n_range: tuple[int, int] = (15, 150)
    replications: int = 1000
    B: int = 1024
    seed: int = 1
    methods: tuple[str, ...] = METHODS
    level: float = 0.95
    continuity: str = "zero"
    name: str = ""

    def __post_init__(self):
        FamilySpec.from_name(self.family)
        if self.replications < 1:
            raise ScenarioError("replications must be at least 1")
        if self.K < 2:
            raise ScenarioError("K must be at least 2")
        if self.tau2 < 0:
            raise ScenarioError("tau2 must be non-negative")
        if self.B < 2:
            raise ScenarioError("B must be at least 2")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ScenarioError(f"unknown method(s) {', '.join(bad)}; expected {', '.join(METHODS)}")
        if self.continuity not in ("zero", "always"):
            raise ScenarioError("continuity must be 'zero' or 'always'")


@dataclass
class MethodSummary:
    bias: float
    bias_se: float
    coverage: float
    coverage_se: float
    length: float
    length_se: float
    n_ok: int
    failures: int

    def metric(self, name: str) -> tuple[float, float]:
        return getattr(self, name), getattr(self, f"{name}_se")


@dataclass
class SimSummary:
    spec: ScenarioSpec
    methods: dict[str, MethodSummary]
    outcomes: list[dict[str, tuple]] = field(default_factory=list, repr=False)


def gamma_dispersion(k: int, K: int) -> float:
    """Dispersion of study ``k`` (1-based) out of ``K``, rising from 1/3 to about 5/3."""
    return (1.0 + 4.0 * (k - 1) / K) / 3.0


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, replication]))


def generate_study(family: FamilySpec, theta0: float, tau2: float, rng: np.random.Generator,
                   k: int = 1, K: int = 1, n_range=(15, 150)) -> StudyRecord:
    """Draw one study's random effect, size and aggregate outcome."""
    v = rng.normal(0.0, math.sqrt(tau2)) if tau2 > 0 else 0.0
    theta = theta0 + v
    n = int(rng.uniform(*n_range))
    kind = family.kind
    sid = f"study{k}"
    if kind is Kind.BINOMIAL:
        y = int(rng.binomial(n, special.expit(theta)))
        return StudyRecord(sid, sid, (1.0,), y / n, n=n, phi_hat=1.0)
    if kind is Kind.POISSON:
        y = int(rng.poisson(n * math.exp(theta)))
        return StudyRecord(sid, sid, (1.0,), y / n, person_time=float(n), phi_hat=1.0)
    if kind is Kind.GAMMA:
        phi = gamma_dispersion(k, K)
        draws = rng.gamma(1.0 / phi, phi * math.exp(theta), size=n)
        ybar = float(draws.mean())
        s2 = float(draws.var(ddof=1))
        return StudyRecord(sid, sid, (1.0,), ybar, n=n, s2=s2, phi_hat=s2 / ybar**2)
    draws = rng.normal(theta, 1.0, size=n)
    return StudyRecord(sid, sid, (1.0,), float(draws.mean()), n=1, phi_hat=float(draws.var(ddof=1)) / n)


def generate_dataset(spec: ScenarioSpec, rng: np.random.Generator) -> Dataset:
    family = FamilySpec.from_name(spec.family)
    records = [
        generate_study(family, spec.theta0, spec.tau2, rng, k, spec.K, spec.n_range)
        for k in range(1, spec.K + 1)
    ]
    return Dataset(family, records, ("intercept",))


def run_replication(spec: ScenarioSpec, replication: int, nodes=None) -> dict[str, tuple]:
    """Per-method ``(estimate, lower, upper, ok)`` for one simulated meta-analysis."""
    ds = generate_dataset(spec, replication_rng(spec.seed, replication))
    out: dict[str, tuple] = {}
    failed = (math.nan, math.nan, math.nan, False)
    if "ndl" in spec.methods or "nplbc" in spec.methods:
        try:
            inp = link_scale_input(ds, policy=spec.continuity)
        except ValueError:
            inp = None
        if "ndl" in spec.methods:
            try:
                r = dl_estimate(inp)
                lo, hi = r.ci(spec.level)
                out["ndl"] = (r.theta, float(lo), float(hi), True)
            except (ValueError, AttributeError):
                out["ndl"] = failed
        if "nplbc" in spec.methods:
            try:
                ci = nn_plbc_interval(inp, spec.level)
                out["nplbc"] = (ci.estimate, ci.lower, ci.upper, ci.converged)
            except (ValueError, AttributeError, ArithmeticError):
                out["nplbc"] = failed
    glmm = [m for m in ("gpl", "gplsbc") if m in spec.methods]
    if glmm:
        nodes = nodes or sobol_nodes(spec.B)
        try:
            fit = fit_mle(ds, nodes)
            if not fit.converged:
                raise ArithmeticError("fit did not converge")
            wanted = [Method.PL if m == "gpl" else Method.PLSBC for m in glmm]
            cis = confidence_intervals(ds, nodes, fit, 0, spec.level, wanted)
            for m, method in zip(glmm, wanted):
                ci = cis[method]
                out[m] = (ci.estimate, ci.lower, ci.upper, ci.converged)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError):
            for m in glmm:
                out[m] = failed
    return out


def _worker(spec: ScenarioSpec, replications: list[int]) -> list[dict[str, tuple]]:
    nodes = sobol_nodes(spec.B)
    return [run_replication(spec, r, nodes) for r in replications]


def summarize(spec: ScenarioSpec, outcomes: list[dict[str, tuple]]) -> SimSummary:
    methods = {}
    for m in spec.methods:
        rows = [o[m] for o in outcomes]
        ok = [r for r in rows if r[3]]
        est = np.array([r[0] for r in ok]) - spec.theta0
        cover = np.array([r[1] <= spec.theta0 <= r[2] for r in ok], dtype=float)
        length = np.array([r[2] - r[1] for r in ok])
        n = len(ok)

        def mean_se(a):
            if n == 0:
                return math.nan, math.nan
            se = float(np.std(a, ddof=1) / math.sqrt(n)) if n > 1 else math.nan
            return float(np.mean(a)), se

        bias, bias_se = mean_se(est)
        length_mean, length_se = mean_se(length)
        cov = float(np.mean(cover)) if n else math.nan
        cov_se = math.sqrt(cov * (1 - cov) / n) if n else math.nan
        methods[m] = MethodSummary(bias, bias_se, cov, cov_se, length_mean, length_se, n, len(rows) - n)
    return SimSummary(spec, methods, outcomes)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("METAGLMM_THREADS", "1")))
    except ValueError:
        return 1


def run_scenario(spec: ScenarioSpec, threads: int | None = None) -> SimSummary:
    """Run every replication of ``spec`` and aggregate the per-method metrics."""
    threads = threads or default_threads()
    reps = list(range(spec.replications))
    if threads <= 1:
        outcomes = _worker(spec, reps)
    else:
        chunks = [reps[i::threads] for i in range(threads)]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(partial(_worker, spec), chunks))
        by_rep = {}
        for chunk, part in zip(chunks, parts):
            by_rep.update(zip(chunk, part))
        outcomes = [by_rep[r] for r in reps]
    return summarize(spec, outcomes)


# ---------------------------------------------------------------------------
# scenario files and result CSVs

_SCENARIO_KEYS = {
    "family": str,
    "k": int,
    "tau2": float,
    "theta0": float,
    "reps": int,
    "replications": int,
    "b": int,
    "seed": int,
    "methods": str,
    "n_min": int,
    "n_max": int,
    "level": float,
    "continuity": str,
}


def parse_scenarios(text: str) -> list[ScenarioSpec]:
    """Parse INI-style scenario blocks, one ``[name]`` section per scenario."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(f"malformed scenario file: {exc}") from None
    specs = []
    for name in parser.sections():
        block = parser[name]
        values = {}
        for key, raw in block.items():
            if key not in _SCENARIO_KEYS:
                raise ScenarioError(f"[{name}] unknown key {key!r}")
            try:
                values[key] = _SCENARIO_KEYS[key](raw.strip())
            except ValueError:
                raise ScenarioError(f"[{name}] invalid value {raw!r} for key {key!r}") from None
        if "family" not in values or "k" not in values or "tau2" not in values:
            raise ScenarioError(f"[{name}] needs at least family, K and tau2")
        kwargs = dict(family=values["family"], K=values["k"], tau2=values["tau2"], name=name)
        if "theta0" in values:
            kwargs["theta0"] = values["theta0"]
        reps = values.get("reps", values.get("replications"))
        if reps is not None:
            kwargs["replications"] = reps
        for key, attr in (("b", "B"), ("seed", "seed"), ("level", "level"), ("continuity", "continuity")):
            if key in values:
                kwargs[attr] = values[key]
        if "methods" in values:
            kwargs["methods"] = tuple(m.strip().lower() for m in values["methods"].split(",") if m.strip())
        if "n_min" in values or "n_max" in values:
            kwargs["n_range"] = (values.get("n_min", 15), values.get("n_max", 150))
        specs.append(ScenarioSpec(**kwargs))
    return specs


def load_scenarios(path) -> list[ScenarioSpec]:
    with open(path, encoding="utf-8") as fh:
        return parse_scenarios(fh.read())


RESULT_COLUMNS = ("scenario", "family", "K", "tau2", "theta0", "replications", "B", "seed",
                  "method", "metric", "value", "mc_se", "n_ok", "failures")


def emit_results(summaries: list[SimSummary], path) -> None:
    """Write summaries as long-format CSV, one row per scenario, method and metric."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for s in summaries:
            sp = s.spec
            head = [sp.name, sp.family, sp.K, repr(sp.tau2), repr(sp.theta0), sp.replications, sp.B, sp.seed]
            for m, ms in s.methods.items():
                for metric in METRICS:
                    value, se = ms.metric(metric)
                    writer.writerow(head + [m, metric, repr(value), repr(se), ms.n_ok, ms.failures])


def read_results(path) -> list[dict]:
    """Parse a file written by :func:`emit_results`."""
    numeric = {"K": int, "tau2": float, "theta0": float, "replications": int, "B": int,
               "seed": int, "value": float, "mc_se": float, "n_ok": int, "failures": int}
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: numeric[k](v) if k in numeric else v for k, v in row.items()} for row in rows]
