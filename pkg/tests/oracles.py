"""Reference computations that do not go through the package's code paths."""

import math

import numpy as np
from scipy import optimize, special, stats


def log_kernel(kind, theta, ybar, weight):
    """Record-level log kernel written out from the family densities."""
    theta = np.asarray(theta, dtype=float)
    if kind == "binomial":
        p = special.expit(theta)
        return weight * (ybar * np.log(p) + (1 - ybar) * np.log1p(-p))
    if kind == "poisson":
        mu = np.exp(theta)
        return weight * (ybar * np.log(mu) - mu)
    if kind == "gamma":
        mu = np.exp(theta)
        return weight * (-ybar / mu - np.log(mu))
    return weight * (ybar * theta - theta**2 / 2)


def agh_loglik(kind, xb, ybar, weight, tau2, nodes=50):
    """log of int exp(kernel(xb + v)) N(v; 0, tau2) dv by adaptive Gauss-Hermite."""
    if tau2 == 0:
        return float(log_kernel(kind, xb, ybar, weight))
    tau = math.sqrt(tau2)

    def h(v):
        return float(log_kernel(kind, xb + v, ybar, weight)) + stats.norm.logpdf(v, 0.0, tau)

    res = optimize.minimize_scalar(lambda v: -h(v), bracket=(-tau, tau), tol=1e-12)
    mode = res.x
    eps = 1e-4 * max(1.0, tau)
    curv = -(h(mode + eps) - 2 * h(mode) + h(mode - eps)) / eps**2
    scale = 1.0 / math.sqrt(curv)
    x, w = np.polynomial.hermite.hermgauss(nodes)
    v = mode + math.sqrt(2.0) * scale * x
    vals = np.array([h(vi) for vi in v]) + x**2 + np.log(w)
    return float(special.logsumexp(vals) + math.log(math.sqrt(2.0) * scale))


def normal_marginal(ybar, var, xb, tau2):
    """Closed-form normal-normal marginal, on the same constant scale as the QMC value."""
    const = ybar**2 / (2 * var) + 0.5 * math.log(2 * math.pi * var)
    return const + stats.norm.logpdf(ybar, xb, math.sqrt(var + tau2))


def ipd_loglik(kind, y, xb, z_nodes, tau2, phi=1.0, t=None):
    """QMC marginal log-likelihood computed from individual observations."""
    theta = xb + math.sqrt(tau2) * np.asarray(z_nodes)
    if kind == "binomial":
        p = special.expit(theta)
        ll = np.sum(stats.bernoulli.logpmf(np.asarray(y)[:, None], p[None, :]), axis=0)
    elif kind == "poisson":
        mu = np.exp(theta)
        ll = np.sum(stats.poisson.logpmf(np.asarray(y)[:, None], np.asarray(t)[:, None] * mu[None, :]), axis=0)
    elif kind == "gamma":
        mu = np.exp(theta)
        shape = 1.0 / phi
        ll = np.sum(stats.gamma.logpdf(np.asarray(y)[:, None], shape, scale=(phi * mu)[None, :]), axis=0)
    else:
        ll = np.sum(stats.norm.logpdf(np.asarray(y)[:, None], theta[None, :], math.sqrt(phi)), axis=0)
    return float(special.logsumexp(ll) - math.log(len(theta)))


def biased_study_design(K_max, rng, p=0.3, n_range=(15, 150)):
    """Frozen sizes, log-OR variances and bias shapes for the Wald bias experiment."""
    n = np.floor(rng.uniform(*n_range, K_max))
    sigma2 = 2.0 / (n * p * (1 - p))
    shape = rng.uniform(0.5, 1.5, K_max)
    return n, sigma2, shape


def wald_noncentrality(sigma2, bias):
    """Mean of the Wald statistic under study bias, weights fixed at 1/sigma2."""
    w = 1.0 / np.asarray(sigma2)
    return float(np.sum(w * bias) / math.sqrt(np.sum(w)))


def rejection_rate(delta, level=0.95):
    z = stats.norm.ppf(0.5 + level / 2)
    return float(stats.norm.sf(z - delta) + stats.norm.cdf(-z - delta))
