"""Maximum-likelihood fitting of the aggregate-data GLMM.

The optimiser works on ``(beta, s)`` with ``tau = softplus(s)``, so
``tau2 = softplus(s)**2`` can approach zero without hitting a boundary.
Gradients are central differences on the deterministic QMC objective.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .data import Dataset
from .qmc import EvaluationError, NodeSet, exponent, log_mean_exp, record_weight

logger = logging.getLogger(__name__)

TAU2_ZERO = 1e-10
DEFAULT_MAX_ITER = 500


def softplus(s):
    return np.logaddexp(0.0, s)


def inverse_softplus(tau: float) -> float:
    tau = max(float(tau), 1e-300)
    if tau > 30:
        return tau
    return math.log(math.expm1(tau)) if tau > 1e-12 else math.log(tau)


class Likelihood:
    """Vectorised QMC log-likelihood of a dataset on a fixed node set."""

    def __init__(self, dataset: Dataset, nodes: NodeSet):
        self.dataset = dataset
        self.nodes = nodes
        self.kind = dataset.family.kind
        self.X = dataset.X
        self.ybar = np.array([r.ybar for r in dataset.records])
        self.weight = np.array(
            [record_weight(dataset.family, r.n, r.person_time, r.phi_hat) for r in dataset.records]
        )
        self._yb = self.ybar[:, None]
        self._w = self.weight[:, None]
        self.n_evals = 0

    def per_record(self, beta, tau2: float) -> np.ndarray:
        self.n_evals += 1
        lin = self.X @ np.asarray(beta, dtype=float)
        theta = lin[:, None] + math.sqrt(max(tau2, 0.0)) * self.nodes.z[None, :]
        return log_mean_exp(exponent(self.kind, theta, self._yb, self._w), axis=1)

    def __call__(self, beta, tau2: float) -> float:
        terms = self.per_record(beta, tau2)
        total = 0.0
        for value in terms:
            total += value
        return float(total)


def total_loglik(dataset: Dataset, beta, tau2: float, nodes: NodeSet) -> float:
    """Sum of per-record QMC log-likelihoods, accumulated in record order."""
    if tau2 < 0:
        raise ValueError(f"tau2 must be non-negative, got {tau2}")
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p,):
        raise ValueError(f"beta has length {beta.size}, dataset has p={dataset.p}")
    terms = Likelihood(dataset, nodes).per_record(beta, tau2)
    for rec, value in zip(dataset.records, terms):
        if not math.isfinite(value):
            raise EvaluationError(
                f"non-finite likelihood for record {rec.record_id} at beta={beta.tolist()}, tau2={tau2}"
            )
    total = 0.0
    for value in terms:
        total += float(value)
    return total


@dataclass
class ModelFit:
    beta_hat: np.ndarray
    tau2_hat: float
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    nodes_B: int
    seed: int | None
    names: tuple[str, ...] = ()
    tau2_fixed: float | None = None
    params: np.ndarray = field(default=None, repr=False)
    message: str = ""


@dataclass
class ConstrainedFit:
    pinned_index: int
    pinned_value: float
    beta: np.ndarray
    tau2_tilde: float
    loglik: float
    converged: bool
    params: np.ndarray = field(default=None, repr=False)

    @property
    def beta_rest(self) -> np.ndarray:
        return np.delete(self.beta, self.pinned_index)


def numerical_gradient(f, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        h = 1e-6 * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (xp[i] - xm[i])
    return g


def _minimize(neg, x0, max_iter):
    """BFGS on numerical gradients, with a Nelder-Mead fallback.

    Returns ``(x, fun, converged, iterations, grad_norm, message)``.
    """
    x0 = np.asarray(x0, dtype=float)
    grad = lambda x: numerical_gradient(neg, x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = optimize.minimize(
            neg, x0, jac=grad, method="BFGS", options={"maxiter": max_iter, "gtol": 1e-6}
        )
    x, fun, nit = res.x, float(res.fun), int(res.nit)
    gnorm = float(np.linalg.norm(grad(x))) if np.isfinite(fun) else math.inf
    converged = bool(res.success) or gnorm < 1e-4
    message = str(res.message)
    if not converged:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            nm = optimize.minimize(
                neg,
                x if np.all(np.isfinite(x)) else x0,
                method="Nelder-Mead",
                options={"maxiter": max_iter * 10, "xatol": 1e-8, "fatol": 1e-10},
            )
        if nm.fun <= fun or not np.isfinite(fun):
            x, fun = nm.x, float(nm.fun)
        nit += int(nm.nit)
        gnorm = float(np.linalg.norm(grad(x)))
        converged = bool(nm.success) and np.isfinite(fun)
        message = f"BFGS: {message}; Nelder-Mead: {nm.message}"
    return x, fun, converged, nit, gnorm, message


def _safe(lik: Likelihood):
    def value(beta, tau2):
        try:
            v = lik(beta, tau2)
        except (EvaluationError, FloatingPointError, ValueError):
            return -math.inf
        return v if math.isfinite(v) else -math.inf
    return value


def default_start(dataset: Dataset) -> tuple[np.ndarray, float]:
    """Starting values from a DerSimonian-Laird fit on the link scale."""
    from .nn import dl_regression, link_scale_input

    try:
        inp = link_scale_input(dataset)
        beta, tau2, _ = dl_regression(inp.theta_hat, inp.sigma2, inp.X)
    except (ValueError, np.linalg.LinAlgError):
        beta, tau2 = np.zeros(dataset.p), 0.0
    if not np.all(np.isfinite(beta)):
        beta = np.zeros(dataset.p)
    return np.asarray(beta, dtype=float), max(float(tau2), 1e-4)


def _start(dataset, init):
    if init is None:
        return default_start(dataset)
    if isinstance(init, ModelFit):
        return np.array(init.beta_hat, dtype=float), max(init.tau2_hat, 1e-4)
    if isinstance(init, ConstrainedFit):
        return np.array(init.beta, dtype=float), max(init.tau2_tilde, 1e-4)
    beta, tau2 = init
    return np.array(beta, dtype=float), max(float(tau2), 1e-8)


def _report_tau2(tau2: float) -> float:
    return 0.0 if tau2 < TAU2_ZERO else tau2


def fit_mle(
    dataset: Dataset,
    nodes: NodeSet,
    init=None,
    *,
    tau2_fixed: float | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
    likelihood: Likelihood | None = None,
) -> ModelFit:
    """Joint maximum-likelihood estimate of ``(beta, tau2)``.

    ``init`` may be a ``(beta, tau2)`` pair or a previous fit.  With
    ``tau2_fixed`` only ``beta`` is optimised.
    """
    if dataset.K < dataset.p + 1:
        logger.warning("K=%d records for p=%d coefficients; estimates may be unstable", dataset.K, dataset.p)
    lik = likelihood or Likelihood(dataset, nodes)
    value = _safe(lik)
    beta0, tau20 = _start(dataset, init)
    p = dataset.p
    if tau2_fixed is not None:
        neg = lambda x: -value(x, tau2_fixed)
        x, fun, ok, nit, gnorm, msg = _minimize(neg, beta0, max_iter)
        beta, tau2 = x, float(tau2_fixed)
    else:
        neg = lambda x: -value(x[:p], float(softplus(x[p])) ** 2)
        x0 = np.append(beta0, inverse_softplus(math.sqrt(tau20)))
        x, fun, ok, nit, gnorm, msg = _minimize(neg, x0, max_iter)
        beta, tau2 = x[:p], float(softplus(x[p])) ** 2
    ok = ok and math.isfinite(fun)
    return ModelFit(
        beta_hat=np.array(beta),
        tau2_hat=_report_tau2(tau2),
        loglik=-fun,
        converged=ok,
        iterations=nit,
        gradient_norm=gnorm,
        nodes_B=nodes.B,
        seed=nodes.seed,
        names=dataset.covariate_names,
        tau2_fixed=tau2_fixed,
        params=np.array(x),
        message=msg,
    )


def fit_constrained(
    dataset: Dataset,
    nodes: NodeSet,
    index: int,
    value: float,
    init=None,
    *,
    tau2_fixed: float | None = None,
    max_iter: int = DEFAULT_MAX_ITER,
    likelihood: Likelihood | None = None,
) -> ConstrainedFit:
    """Maximise the likelihood with coefficient ``index`` pinned at ``value``."""
    p = dataset.p
    if not 0 <= index < p:
        raise IndexError(f"coefficient index {index} out of range for p={p}")
    lik = likelihood or Likelihood(dataset, nodes)
    loglik = _safe(lik)
    beta0, tau20 = _start(dataset, init)
    free = [j for j in range(p) if j != index]

    def unpack(x):
        beta = np.empty(p)
        beta[index] = value
        beta[free] = x[: len(free)]
        if tau2_fixed is not None:
            return beta, float(tau2_fixed)
        return beta, float(softplus(x[len(free)])) ** 2

    x0 = beta0[free]
    if tau2_fixed is None:
        x0 = np.append(x0, inverse_softplus(math.sqrt(tau20)))
    neg = lambda x: -loglik(*unpack(x))
    if x0.size == 0:
        x, fun, ok = x0, neg(x0), True
    else:
        x, fun, ok, _, _, _ = _minimize(neg, x0, max_iter)
    beta, tau2 = unpack(x)
    return ConstrainedFit(
        pinned_index=index,
        pinned_value=float(value),
        beta=beta,
        tau2_tilde=_report_tau2(tau2),
        loglik=-fun,
        converged=ok and math.isfinite(fun),
        params=np.array(x),
    )
