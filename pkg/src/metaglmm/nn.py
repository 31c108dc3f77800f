"""Normal-normal random-effects meta-analysis.

These are the conventional comparators: DerSimonian-Laird pooling with a
Wald interval, and the closed-form profile likelihood with Bartlett
correction.  The module also carries an exact enumeration of the bias of the
continuity-corrected log odds ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .data import Dataset
from .family import Kind
from .inference import (
    IntervalResult,
    Method,
    _cells_corrected,
    bartlett_C,
    chi2_cutoff,
    corrected_lr,
    find_bound,
)


@dataclass(frozen=True)
class NNInput:
    theta_hat: np.ndarray
    sigma2: np.ndarray
    X: np.ndarray | None = None

    def __post_init__(self):
        th = np.asarray(self.theta_hat, dtype=float)
        s2 = np.asarray(self.sigma2, dtype=float)
        if th.ndim != 1 or th.shape != s2.shape:
            raise ValueError("theta_hat and sigma2 must be vectors of equal length")
        if np.any(s2 <= 0) or not np.all(np.isfinite(s2)):
            raise ValueError("within-study variances must be positive and finite")
        if not np.all(np.isfinite(th)):
            raise ValueError("study estimates must be finite")
        X = np.ones((th.size, 1)) if self.X is None else np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != th.size:
            raise ValueError("covariate matrix rows must match the number of studies")
        object.__setattr__(self, "theta_hat", th)
        object.__setattr__(self, "sigma2", s2)
        object.__setattr__(self, "X", X)

    @property
    def K(self) -> int:
        return self.theta_hat.size


@dataclass(frozen=True)
class DLResult:
    theta: float
    tau2: float
    se: float
    Q: float

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        z = stats.norm.ppf(0.5 + level / 2)
        return self.theta - z * self.se, self.theta + z * self.se


def dl_estimate(inp: NNInput) -> DLResult:
    """DerSimonian-Laird pooled estimate for an intercept-only model."""
    if inp.K < 2:
        raise ValueError("DerSimonian-Laird needs at least two studies")
    y, v = inp.theta_hat, inp.sigma2
    w = 1.0 / v
    fixed = np.sum(w * y) / np.sum(w)
    Q = float(np.sum(w * (y - fixed) ** 2))
    c = np.sum(w) - np.sum(w**2) / np.sum(w)
    tau2 = max(0.0, (Q - (inp.K - 1)) / c)
    ws = 1.0 / (v + tau2)
    theta = float(np.sum(ws * y) / np.sum(ws))
    return DLResult(theta, float(tau2), float(np.sum(ws) ** -0.5), Q)


def dl_regression(theta_hat, sigma2, X):
    """Method-of-moments meta-regression; returns ``(beta, tau2, cov)``."""
    y = np.asarray(theta_hat, dtype=float)
    v = np.asarray(sigma2, dtype=float)
    X = np.asarray(X, dtype=float)
    K, p = X.shape
    W = 1.0 / v
    XtW = X.T * W
    A = np.linalg.inv(XtW @ X)
    beta_fe = A @ (XtW @ y)
    Q = float(np.sum(W * (y - X @ beta_fe) ** 2))
    c = np.sum(W) - np.trace(A @ ((X.T * W**2) @ X))
    tau2 = max(0.0, (Q - (K - p)) / c) if c > 0 else 0.0
    Ws = 1.0 / (v + tau2)
    XtWs = X.T * Ws
    cov = np.linalg.inv(XtWs @ X)
    return cov @ (XtWs @ y), float(tau2), cov


def wald_test(inp: NNInput, theta0: float, tau2: float | None = None) -> tuple[float, float]:
    """Wald statistic ``sum w (theta_k - theta0) / sqrt(sum w)`` and its two-sided p-value.

    Weights use the DerSimonian-Laird ``tau2`` unless one is given.
    """
    if tau2 is None:
        tau2 = dl_estimate(inp).tau2
    w = 1.0 / (inp.sigma2 + tau2)
    T = float(np.sum(w * (inp.theta_hat - theta0)) / math.sqrt(np.sum(w)))
    return T, float(2.0 * stats.norm.sf(abs(T)))


# ---------------------------------------------------------------------------
# closed-form normal-normal likelihood


def nn_loglik(inp: NNInput, beta, tau2: float) -> float:
    """Marginal log-likelihood of ``theta_hat ~ N(X beta, sigma2 + tau2)``."""
    V = inp.sigma2 + tau2
    r = inp.theta_hat - inp.X @ np.atleast_1d(np.asarray(beta, dtype=float))
    return float(-0.5 * np.sum(np.log(2 * math.pi * V) + r * r / V))


def _gls(inp: NNInput, tau2: float, fixed: dict[int, float]):
    """Weighted least-squares coefficients at ``tau2`` with some coefficients held fixed."""
    p = inp.X.shape[1]
    free = [j for j in range(p) if j not in fixed]
    beta = np.zeros(p)
    for j, b in fixed.items():
        beta[j] = b
    if free:
        w = 1.0 / (inp.sigma2 + tau2)
        Xf = inp.X[:, free]
        r = inp.theta_hat - inp.X @ beta
        beta[free] = np.linalg.solve((Xf.T * w) @ Xf, (Xf.T * w) @ r)
    return beta


def _tau_upper(inp: NNInput) -> float:
    spread = float(np.var(inp.theta_hat)) + float(np.max(inp.sigma2))
    return math.sqrt(10.0 * spread + 1.0)


def _profile_tau(inp: NNInput, fixed: dict[int, float], tau2_fixed: float | None = None):
    if tau2_fixed is not None:
        beta = _gls(inp, tau2_fixed, fixed)
        return nn_loglik(inp, beta, tau2_fixed), beta, tau2_fixed

    def neg(tau):
        t2 = tau * tau
        return -nn_loglik(inp, _gls(inp, t2, fixed), t2)

    upper = _tau_upper(inp)
    grid = np.linspace(0.0, upper, 41)
    vals = [neg(t) for t in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = optimize.minimize_scalar(neg, bounds=(a, b), method="bounded", options={"xatol": 1e-10})
    tau, fun = (res.x, res.fun) if res.fun <= vals[i] else (grid[i], vals[i])
    t2 = float(tau) ** 2
    return -float(fun), _gls(inp, t2, fixed), t2


def nn_mle(inp: NNInput, tau2_fixed: float | None = None):
    """Maximum-likelihood ``(beta, tau2, loglik)`` of the normal-normal model."""
    ll, beta, t2 = _profile_tau(inp, {}, tau2_fixed)
    return beta, t2, ll


def nn_profile(inp: NNInput, index: int, value: float, tau2_fixed: float | None = None):
    """Profile log-likelihood and constrained ``tau2`` with coefficient ``index`` fixed."""
    ll, _, t2 = _profile_tau(inp, {index: float(value)}, tau2_fixed)
    return ll, t2


def nn_plbc_interval(inp: NNInput, level: float = 0.95, index: int = 0, correct: bool = True,
                     tau2_fixed: float | None = None) -> IntervalResult:
    """Normal-normal profile-likelihood interval, Bartlett corrected unless ``correct=False``."""
    if not 0.5 < level < 1.0:
        raise ValueError(f"level must lie in (0.5, 1), got {level}")
    beta, tau2, ll_max = nn_mle(inp, tau2_fixed)
    q = chi2_cutoff(level)
    cache: dict[float, tuple[float, float]] = {}
    trace = []

    def stat(b):
        if b not in cache:
            cache[b] = nn_profile(inp, index, b, tau2_fixed)
        ll, t2 = cache[b]
        T = max(0.0, -2.0 * (ll - ll_max))
        Tc = corrected_lr(T, bartlett_C(inp.sigma2, t2))
        trace.append((b, T, Tc))
        return Tc if correct else T

    w = 1.0 / (inp.sigma2 + tau2)
    se = math.sqrt(np.linalg.inv((inp.X.T * w) @ inp.X)[index, index])
    est = float(beta[index])
    lower, lo_flag = find_bound(stat, est, -1, 0.5 * se, q)
    upper, hi_flag = find_bound(stat, est, +1, 0.5 * se, q)
    c_end = tuple(bartlett_C(inp.sigma2, cache[b][1]) if b in cache else math.nan for b in (lower, upper))
    return IntervalResult(
        index=index,
        estimate=est,
        method=Method.PLBC if correct else Method.PL,
        level=level,
        lower=lower,
        upper=upper,
        bartlett_C=bartlett_C(inp.sigma2, tau2),
        boundary_flags=(lo_flag, hi_flag),
        endpoint_C=c_end,
        trace=sorted(trace),
    )


# ---------------------------------------------------------------------------
# link-scale summaries of aggregate records


def _arm_estimate(kind: Kind, rec, c: float) -> tuple[float, float]:
    if kind is Kind.BINOMIAL:
        y = rec.events
        return math.log((y + c) / (rec.n - y + c)), 1.0 / (y + c) + 1.0 / (rec.n - y + c)
    if kind is Kind.POISSON:
        y = rec.events
        return math.log((y + c) / rec.person_time), 1.0 / (y + c)
    if kind is Kind.GAMMA:
        return math.log(rec.ybar), rec.s2 / (rec.n * rec.ybar**2)
    return rec.ybar, rec.phi_hat / (rec.n or 1)


def _needs_correction(kind: Kind, recs, policy: str) -> bool:
    if kind is Kind.BINOMIAL:
        return any(_cells_corrected(r.events, r.n, 0.5, policy) for r in recs)
    if kind is Kind.POISSON:
        return policy == "always" or (policy == "zero" and any(r.events <= 0 for r in recs))
    return False


def link_scale_input(dataset: Dataset, a: float = 0.5, policy: str = "zero") -> NNInput:
    """One link-scale estimate per record, with the dataset's covariates."""
    kind = dataset.family.kind
    th, s2 = [], []
    for rec in dataset.records:
        c = a if _needs_correction(kind, [rec], policy) else 0.0
        t, v = _arm_estimate(kind, rec, c)
        th.append(t)
        s2.append(v)
    return NNInput(np.array(th), np.array(s2), dataset.X)


def contrast_input(dataset: Dataset, a: float = 0.5, policy: str = "zero") -> NNInput:
    """Per-study treatment-minus-control contrasts of a two-arm dataset.

    Binomial contrasts are log odds ratios with the correction added to all
    four cells of a study when any cell needs it.
    """
    if not dataset.two_arm:
        raise ValueError("contrasts need a two-arm dataset")
    kind = dataset.family.kind
    studies: dict[str, dict[int, object]] = {}
    for rec in dataset.records:
        studies.setdefault(rec.study_id, {})[rec.arm] = rec
    th, s2 = [], []
    for study, arms in studies.items():
        if set(arms) != {0, 1}:
            raise ValueError(f"study {study!r} lacks an arm")
        c = a if _needs_correction(kind, arms.values(), policy) else 0.0
        t1, v1 = _arm_estimate(kind, arms[1], c)
        t0, v0 = _arm_estimate(kind, arms[0], c)
        th.append(t1 - t0)
        s2.append(v1 + v0)
    return NNInput(np.array(th), np.array(s2))


def nn_input(dataset: Dataset, a: float = 0.5, policy: str = "zero") -> NNInput:
    """Contrasts for two-arm data, otherwise per-record estimates."""
    if dataset.two_arm:
        return contrast_input(dataset, a, policy)
    return link_scale_input(dataset, a, policy)


# ---------------------------------------------------------------------------
# exact bias of the continuity-corrected log odds ratio


@dataclass(frozen=True)
class BiasResult:
    bias: float
    conditional: bool
    excluded_probability: float


def log_or_bias_oracle(n0: int, n1: int, mu: float, theta: float, a: float = 0.5) -> BiasResult:
    """``E[log OR_a] - theta`` by enumerating every pair of binomial outcomes.

    With ``a = 0`` outcomes with an empty cell give an infinite log odds
    ratio; the expectation is then taken conditional on all cells being
    non-empty and ``conditional`` is set.
    """
    if not (0 < n0 <= 500 and 0 < n1 <= 500):
        raise ValueError("enumeration is limited to 1 <= n0, n1 <= 500")
    if not 0.0 <= a <= 1.0:
        raise ValueError("continuity correction must lie in [0, 1]")
    p0 = 1.0 / (1.0 + math.exp(-mu))
    p1 = 1.0 / (1.0 + math.exp(-(mu + theta)))
    y0 = np.arange(n0 + 1)
    y1 = np.arange(n1 + 1)
    f0 = stats.binom.pmf(y0, n0, p0)
    f1 = stats.binom.pmf(y1, n1, p1)
    with np.errstate(divide="ignore"):
        l0 = np.log(y0 + a) - np.log(n0 - y0 + a)
        l1 = np.log(y1 + a) - np.log(n1 - y1 + a)
    ok0 = np.isfinite(l0)
    ok1 = np.isfinite(l1)
    m0 = f0[ok0].sum()
    m1 = f1[ok1].sum()
    e0 = np.sum(f0[ok0] * l0[ok0]) / m0
    e1 = np.sum(f1[ok1] * l1[ok1]) / m1
    # the finite-cell events are independent across arms
    excluded = 0.0 if ok0.all() and ok1.all() else max(1.0 - m0 * m1, 0.0)
    return BiasResult(float(e1 - e0 - theta), bool(excluded > 0), float(excluded))
