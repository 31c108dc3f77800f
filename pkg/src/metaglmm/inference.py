"""Profile-likelihood intervals with the simplified Bartlett correction.

The likelihood-ratio statistic ``T`` for one coefficient is divided by
``1 + 2C``, where ``C`` is the correction term of the normal-normal model
evaluated with plug-in within-study variances and the constrained ``tau2``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .data import Dataset
from .family import Kind
from .fit import ConstrainedFit, Likelihood, ModelFit, fit_constrained
from .qmc import EvaluationError, NodeSet


class Method(enum.Enum):
    PL = "PL"
    PLSBC = "PLSBC"
    PLBC = "PLBC"


class BoundStatus(enum.Enum):
    CONVERGED = "Converged"
    UNBOUNDED = "Unbounded"
    MAX_BRACKET = "MaxBracket"


@dataclass
class IntervalResult:
    index: int
    estimate: float
    method: Method
    level: float
    lower: float
    upper: float
    bartlett_C: float
    boundary_flags: tuple[BoundStatus, BoundStatus]
    name: str = ""
    endpoint_C: tuple[float, float] = (math.nan, math.nan)
    trace: list[tuple[float, float, float]] = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return all(f is BoundStatus.CONVERGED for f in self.boundary_flags)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def chi2_cutoff(level: float) -> float:
    """Upper ``1 - level`` quantile of the chi-square distribution with one df."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return float(stats.chi2.ppf(level, 1))


def bartlett_C(sigma2, tau2_tilde: float) -> float:
    """Normal-normal Bartlett term ``sum v^-3 / (sum v^-1 * sum v^-2)`` with ``v = sigma2 + tau2``."""
    v = np.asarray(sigma2, dtype=float) + float(tau2_tilde)
    if v.size == 0:
        raise ValueError("need at least one within-study variance")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("total variances sigma2 + tau2 must be positive and finite")
    w = 1.0 / v
    return float(np.sum(w**3) / (np.sum(w) * np.sum(w**2)))


def corrected_lr(T: float, C: float) -> float:
    """Bartlett-corrected statistic ``T / (1 + 2C)``."""
    return T / (1.0 + 2.0 * C)


def _cells_corrected(events: float, n: float, a: float, policy: str) -> bool:
    if policy == "always":
        return True
    if policy == "zero":
        return events <= 0 or events >= n
    if policy == "never":
        return False
    raise ValueError(f"unknown continuity policy {policy!r}")


def within_study_variances(dataset: Dataset, a: float = 0.5, policy: str = "zero") -> np.ndarray:
    """Delta-method variance of each record's link-scale estimate.

    Binomial: ``1/(y+a) + 1/(n-y+a)``; Poisson: ``1/(events+a)``; gamma:
    ``s2/(n ybar^2)``; normal: the reported variance.  The correction ``a`` is
    used only at boundary counts unless ``policy='always'``.
    """
    kind = dataset.family.kind
    out = np.empty(dataset.K)
    for i, rec in enumerate(dataset.records):
        if kind is Kind.BINOMIAL:
            y = rec.events
            c = a if _cells_corrected(y, rec.n, a, policy) else 0.0
            v = 1.0 / (y + c) + 1.0 / (rec.n - y + c) if min(y, rec.n - y) + c > 0 else math.inf
        elif kind is Kind.POISSON:
            y = rec.events
            c = a if (policy == "always" or (policy == "zero" and y <= 0)) else 0.0
            v = 1.0 / (y + c) if y + c > 0 else math.inf
        elif kind is Kind.GAMMA:
            v = rec.s2 / (rec.n * rec.ybar**2)
        else:
            v = rec.phi_hat / (rec.n or 1)
        if not (math.isfinite(v) and v > 0):
            raise ValueError(f"record {rec.record_id}: zero-variance record cannot be resolved")
        out[i] = v
    return out


def bartlett_variances(dataset: Dataset) -> np.ndarray:
    """Within-study variances fed to the simplified Bartlett term of the GLMM.

    Same as :func:`within_study_variances` except for gamma records, which use
    the plug-in dispersion ``s2/ybar^2`` itself.
    """
    if dataset.family.kind is Kind.GAMMA:
        return np.array([rec.s2 / rec.ybar**2 for rec in dataset.records])
    return within_study_variances(dataset)


# ---------------------------------------------------------------------------
# bound search shared by the GLMM and normal-normal intervals


def find_bound(stat, estimate: float, direction: int, step: float, cutoff: float,
               max_steps: int = 40, max_width: float = 50.0, tol: float = 1e-4):
    """Locate where ``stat`` crosses ``cutoff`` on one side of ``estimate``.

    Steps outward by ``step``, doubling each time, until the statistic exceeds
    the cutoff; the crossing is then refined by Brent's method until the
    statistic is within ``tol`` of the cutoff.  The bound is reported as
    infinite once the search is wider than ``max_width`` and has passed
    ``max_width`` on the coefficient scale.  Returns ``(bound, status)``.
    """
    inside = estimate
    offset = step
    for _ in range(max_steps):
        probe = estimate + direction * offset
        # a diverged estimate (e.g. all-zero arms) can sit far out with a finite bound
        # on the other side, so both the width and the position must be extreme
        if offset > max_width and direction * probe > max_width:
            if direction * inside >= max_width:
                return direction * math.inf, BoundStatus.UNBOUNDED
            # the doubling jumped past the cap; look at the cap itself first
            probe = direction * max_width
            offset = direction * (probe - estimate)
        try:
            value = stat(probe)
        except EvaluationError:
            return inside, BoundStatus.MAX_BRACKET
        if not math.isfinite(value):
            return inside, BoundStatus.MAX_BRACKET
        if value >= cutoff:
            break
        inside = probe
        offset *= 2.0
    else:
        return inside, BoundStatus.MAX_BRACKET

    f = lambda b: stat(b) - cutoff
    lo, hi = sorted((inside, probe))
    root = optimize.brentq(f, lo, hi, xtol=1e-10, rtol=4 * np.finfo(float).eps, maxiter=200)
    # brentq stops on bracket width; bisect further if the statistic is still off
    a, b = inside, probe
    for _ in range(60):
        fr = f(root)
        if abs(fr) <= tol:
            break
        if fr < 0:
            a = root
        else:
            b = root
        root = 0.5 * (a + b)
    return root, BoundStatus.CONVERGED


# ---------------------------------------------------------------------------
# GLMM profile likelihood


class Profile:
    """Constrained fits along one coefficient, cached and warm-started."""

    def __init__(self, dataset: Dataset, nodes: NodeSet, fit: ModelFit, index: int,
                 likelihood: Likelihood | None = None):
        if not 0 <= index < dataset.p:
            raise IndexError(f"coefficient index {index} out of range for p={dataset.p}")
        self.dataset = dataset
        self.nodes = nodes
        self.fit = fit
        self.index = index
        self.likelihood = likelihood or Likelihood(dataset, nodes)
        self.sigma2 = bartlett_variances(dataset)
        self._cache: dict[float, ConstrainedFit] = {}

    def constrained(self, value: float) -> ConstrainedFit:
        value = float(value)
        hit = self._cache.get(value)
        if hit is not None:
            return hit
        # continue along the path from the estimate: starting from a fit further out
        # can inherit a poor optimum (seen with all-zero arms)
        est = float(self.fit.beta_hat[self.index])
        inner = [b for b in self._cache if (b - est) * (value - est) > 0 and abs(b - est) < abs(value - est)]
        init = self._cache[max(inner, key=lambda b: abs(b - est))] if inner else self.fit
        cf = fit_constrained(self.dataset, self.nodes, self.index, value, init,
                             tau2_fixed=self.fit.tau2_fixed, likelihood=self.likelihood)
        if not math.isfinite(cf.loglik):
            raise EvaluationError(f"constrained fit failed at pinned value {value}")
        self._cache[value] = cf
        return cf

    def lr(self, value: float) -> float:
        cf = self.constrained(value)
        T = -2.0 * (cf.loglik - self.fit.loglik)
        if T < 0:
            # a constrained fit better than the unconstrained one means the MLE was not exact
            T = 0.0
        return T

    def corrected(self, value: float) -> float:
        cf = self.constrained(value)
        return corrected_lr(self.lr(value), bartlett_C(self.sigma2, cf.tau2_tilde))


def profile_lr(dataset: Dataset, nodes: NodeSet, fit: ModelFit, index: int, value: float) -> float:
    """Profile likelihood-ratio statistic for coefficient ``index`` at ``value``."""
    if not fit.converged:
        raise ValueError("profile_lr needs a converged fit")
    return Profile(dataset, nodes, fit, index).lr(value)


def wald_se(dataset: Dataset, nodes: NodeSet, fit: ModelFit, index: int,
            likelihood: Likelihood | None = None) -> float:
    """Standard error from the numerical Hessian in ``beta`` at fixed ``tau2``."""
    lik = likelihood or Likelihood(dataset, nodes)
    beta = np.asarray(fit.beta_hat, dtype=float)
    p = beta.size
    h = 1e-4 * (1.0 + np.abs(beta))
    H = np.empty((p, p))
    f0 = lik(beta, fit.tau2_hat)
    for i in range(p):
        for j in range(i, p):
            if i == j:
                e = np.zeros(p)
                e[i] = h[i]
                H[i, i] = (lik(beta + e, fit.tau2_hat) - 2 * f0 + lik(beta - e, fit.tau2_hat)) / h[i] ** 2
            else:
                ei = np.zeros(p)
                ej = np.zeros(p)
                ei[i] = h[i]
                ej[j] = h[j]
                H[i, j] = H[j, i] = (
                    lik(beta + ei + ej, fit.tau2_hat) - lik(beta + ei - ej, fit.tau2_hat)
                    - lik(beta - ei + ej, fit.tau2_hat) + lik(beta - ei - ej, fit.tau2_hat)
                ) / (4 * h[i] * h[j])
    try:
        cov = np.linalg.inv(-H)
        se = math.sqrt(cov[index, index])
    except (np.linalg.LinAlgError, ValueError):
        se = math.nan
    if not (math.isfinite(se) and se > 0):
        se = 0.1
    return se


def confidence_interval(dataset: Dataset, nodes: NodeSet, fit: ModelFit, index: int,
                        level: float = 0.95, method: Method | str = Method.PLSBC,
                        profile: Profile | None = None, se: float | None = None) -> IntervalResult:
    """Profile-likelihood interval (PL) or its simplified-Bartlett version (PLSBC)."""
    method = Method(method)
    if method is Method.PLBC:
        raise ValueError("PLBC is the normal-normal interval; use nn.nn_plbc_interval")
    if not 0.5 < level < 1.0:
        raise ValueError(f"level must lie in (0.5, 1), got {level}")
    if not fit.converged:
        raise ValueError("confidence_interval needs a converged fit")
    profile = profile or Profile(dataset, nodes, fit, index)
    if se is None:
        se = wald_se(dataset, nodes, fit, index, profile.likelihood)
    q = chi2_cutoff(level)
    trace: list[tuple[float, float, float]] = []

    def stat(b):
        T = profile.lr(b)
        Tc = corrected_lr(T, bartlett_C(profile.sigma2, profile.constrained(b).tau2_tilde))
        trace.append((b, T, Tc))
        return Tc if method is Method.PLSBC else T

    est = float(fit.beta_hat[index])
    lower, lo_flag = find_bound(stat, est, -1, 0.5 * se, q)
    upper, hi_flag = find_bound(stat, est, +1, 0.5 * se, q)
    c_end = tuple(
        bartlett_C(profile.sigma2, profile.constrained(b).tau2_tilde) if math.isfinite(b) else math.nan
        for b in (lower, upper)
    )
    return IntervalResult(
        index=index,
        estimate=est,
        method=method,
        level=level,
        lower=lower,
        upper=upper,
        bartlett_C=bartlett_C(profile.sigma2, fit.tau2_hat),
        boundary_flags=(lo_flag, hi_flag),
        name=dataset.covariate_names[index],
        endpoint_C=c_end,
        trace=sorted(trace),
    )


def confidence_intervals(dataset: Dataset, nodes: NodeSet, fit: ModelFit, index: int,
                         level: float = 0.95, methods=(Method.PL, Method.PLSBC),
                         likelihood: Likelihood | None = None) -> dict[Method, IntervalResult]:
    """Several interval types for one coefficient, sharing the constrained fits."""
    profile = Profile(dataset, nodes, fit, index, likelihood)
    se = wald_se(dataset, nodes, fit, index, profile.likelihood)
    return {
        Method(m): confidence_interval(dataset, nodes, fit, index, level, m, profile=profile, se=se)
        for m in methods
    }
