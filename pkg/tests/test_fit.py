import math

import numpy as np
import pytest
from scipy import optimize, special, stats

from metaglmm.data import Dataset, StudyRecord
from metaglmm.family import BINOMIAL, GAMMA, NORMAL, POISSON
from metaglmm.fit import (
    fit_constrained,
    fit_mle,
    inverse_softplus,
    softplus,
    total_loglik,
)
from metaglmm.inference import wald_se
from metaglmm.qmc import EvaluationError, marginal_loglik_study, sobol_nodes
from metaglmm.sim import ScenarioSpec, generate_dataset, replication_rng


def normal_dataset(y, var, X=None):
    X = np.ones((len(y), 1)) if X is None else np.asarray(X, dtype=float)
    recs = [
        StudyRecord(f"s{i}", f"s{i}", tuple(X[i]), float(y[i]), n=1, phi_hat=float(var[i]))
        for i in range(len(y))
    ]
    return Dataset(NORMAL, recs)


def nn_closed_form(y, var, X, beta, tau2):
    return float(np.sum(stats.norm.logpdf(y, X @ beta, np.sqrt(var + tau2))))


Y = np.array([0.3, -0.1, 0.8, 0.45, 0.05, 0.6])
V = np.array([0.04, 0.09, 0.05, 0.02, 0.12, 0.07])


def binomial_dataset(seed=0, K=8, theta0=-1.0, tau2=0.5):
    spec = ScenarioSpec(family="binomial", K=K, tau2=tau2, theta0=theta0, n_range=(20, 120), seed=seed)
    return generate_dataset(spec, replication_rng(seed, 0))


def test_softplus_round_trip():
    for tau in (1e-8, 0.01, 0.5, 3.0, 50.0):
        assert float(softplus(inverse_softplus(tau))) == pytest.approx(tau, rel=1e-10)


def test_single_record_equals_study_loglik():
    rec = StudyRecord("a", "a", (1.0,), 0.25, n=40, phi_hat=1.0)
    nodes = sobol_nodes(256)
    ds = Dataset(BINOMIAL, [rec])
    assert total_loglik(ds, [0.2], 0.7, nodes) == marginal_loglik_study(rec, BINOMIAL, [0.2], 0.7, nodes)


def test_duplicated_dataset_doubles(long2020):
    nodes = sobol_nodes(512)
    twice = long2020.with_records(long2020.records + long2020.records)
    beta = [2.5, -0.4]
    assert total_loglik(twice, beta, 0.2, nodes) == pytest.approx(2 * total_loglik(long2020, beta, 0.2, nodes), rel=1e-14)


def test_total_loglik_errors(long2020):
    nodes = sobol_nodes(64)
    with pytest.raises(ValueError, match="p=2"):
        total_loglik(long2020, [0.0], 0.1, nodes)
    with pytest.raises(ValueError, match="tau2"):
        total_loglik(long2020, [0.0, 0.0], -0.1, nodes)
    ds = Dataset(POISSON, [StudyRecord("a", "a", (1.0,), 1.0, person_time=10.0, phi_hat=1.0)])
    with pytest.raises(EvaluationError, match="record a"):
        total_loglik(ds, [800.0], 0.0, nodes)


def test_normal_differences_match_closed_form():
    nodes = sobol_nodes(4096)
    ds = normal_dataset(Y, V)
    X = ds.X
    points = [(np.array([0.3]), 0.1), (np.array([0.0]), 0.5), (np.array([0.6]), 0.02), (np.array([0.35]), 1.5)]
    qmc = np.array([total_loglik(ds, b, t, nodes) for b, t in points])
    exact = np.array([nn_closed_form(Y, V, X, b, t) for b, t in points])
    assert np.max(np.abs((qmc - qmc[0]) - (exact - exact[0]))) < 1e-4


def test_normal_weighted_mean_at_fitted_tau2():
    nodes = sobol_nodes(4096)
    ds = normal_dataset(Y, V)
    fit = fit_mle(ds, nodes)
    assert fit.converged
    pinned = fit_mle(ds, nodes, init=fit, tau2_fixed=fit.tau2_hat)
    w = 1.0 / (V + fit.tau2_hat)
    assert pinned.beta_hat[0] == pytest.approx(np.sum(w * Y) / np.sum(w), abs=1e-6)


def test_normal_mle_matches_closed_form_mle():
    nodes = sobol_nodes(4096)
    ds = normal_dataset(Y, V)
    fit = fit_mle(ds, nodes)
    res = optimize.minimize(
        lambda x: -nn_closed_form(Y, V, ds.X, x[:1], x[1] ** 2), [0.3, 0.2], method="Nelder-Mead",
        options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000},
    )
    assert fit.beta_hat[0] == pytest.approx(res.x[0], abs=1e-4)
    assert fit.tau2_hat == pytest.approx(res.x[1] ** 2, abs=1e-4)


@pytest.mark.parametrize("family,ybar,inverse", [
    (BINOMIAL, 0.3, lambda y: special.logit(y)),
    (POISSON, 2.5, math.log),
    (GAMMA, 4.0, math.log),
])
def test_identical_records_solve_score_equation(family, ybar, inverse):
    kw = {"person_time": 30.0} if family is POISSON else {"n": 30}
    if family is GAMMA:
        kw["s2"] = 8.0
        kw["phi_hat"] = 8.0 / 16.0
    else:
        kw["phi_hat"] = 1.0
    recs = [StudyRecord(f"s{i}", f"s{i}", (1.0,), ybar, **kw) for i in range(4)]
    fit = fit_mle(Dataset(family, recs), sobol_nodes(256), tau2_fixed=0.0)
    assert fit.converged
    assert fit.tau2_hat == 0.0
    assert fit.beta_hat[0] == pytest.approx(inverse(ybar), abs=1e-6)


def test_long2020_treatment_effect(long2020, nodes2048):
    fit = fit_mle(long2020, nodes2048)
    assert fit.converged
    assert fit.beta_hat[1] == pytest.approx(-0.431, abs=0.01)
    assert fit.tau2_hat > 0
    assert math.isfinite(fit.loglik)
    assert fit.nodes_B == 2048


def test_constrained_at_mle_is_inactive(long2020, nodes2048):
    fit = fit_mle(long2020, nodes2048)
    c = fit_constrained(long2020, nodes2048, 1, fit.beta_hat[1], init=fit)
    assert abs(c.loglik - fit.loglik) < 1e-8
    assert c.beta[1] == fit.beta_hat[1]
    assert c.beta_rest.shape == (1,)


def test_constrained_far_is_smaller(long2020, nodes2048):
    fit = fit_mle(long2020, nodes2048)
    c = fit_constrained(long2020, nodes2048, 1, fit.beta_hat[1] + 1.0, init=fit)
    assert c.loglik < fit.loglik - 1.0
    assert c.loglik <= fit.loglik + 1e-8


def test_constrained_bad_index(long2020, nodes2048):
    with pytest.raises(IndexError):
        fit_constrained(long2020, nodes2048, 2, 0.0)


def test_normal_profile_matches_closed_form_profile():
    # data drawn with real heterogeneity; prior-sampled nodes are sparse where
    # a residual sits many tau out, which a near-zero tau2 fit would provoke
    rng = np.random.default_rng(3)
    var = rng.uniform(0.02, 0.12, 8)
    z = np.array([0, 1] * 4)
    y = 0.2 + 0.3 * z + rng.normal(0, math.sqrt(0.3), 8) + rng.normal(0, np.sqrt(var))
    X = np.column_stack([np.ones(8), z])
    nodes = sobol_nodes(4096)
    ds = normal_dataset(y, var, X)
    fit = fit_mle(ds, nodes)

    def exact_profile(b1):
        def neg(x):
            return -nn_closed_form(y, var, X, np.array([x[0], b1]), x[1] ** 2)
        opts = {"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000}
        runs = [optimize.minimize(neg, [0.3, t], method="Nelder-Mead", options=opts) for t in (0.1, 0.5, 1.0)]
        return -min(r.fun for r in runs)

    se = wald_se(ds, nodes, fit, 1)
    values = fit.beta_hat[1] + np.linspace(-3, 3, 7) * se
    glmm = np.array([fit_constrained(ds, nodes, 1, b, init=fit).loglik for b in values])
    exact = np.array([exact_profile(b) for b in values])
    # the omitted constants cancel in differences
    assert np.max(np.abs((glmm - glmm[3]) - (exact - exact[3]))) < 1e-4


def test_fit_is_deterministic(long2020):
    a = fit_mle(long2020, sobol_nodes(1024, seed=5))
    b = fit_mle(long2020, sobol_nodes(1024, seed=5))
    assert a.beta_hat.tobytes() == b.beta_hat.tobytes()
    assert a.tau2_hat == b.tau2_hat and a.loglik == b.loglik
    assert a.seed == 5


@pytest.mark.parametrize("seed", range(4))
def test_profile_is_unimodal(seed):
    nodes = sobol_nodes(1024)
    ds = binomial_dataset(seed)
    fit = fit_mle(ds, nodes)
    se = wald_se(ds, nodes, fit, 0)
    grid = fit.beta_hat[0] + np.linspace(-4, 4, 21) * se
    prof = []
    init = fit
    for b in grid:
        c = fit_constrained(ds, nodes, 0, b, init=init)
        prof.append(c.loglik)
    prof = np.array(prof)
    interior = prof[1:-1]
    strict_min = (interior < prof[:-2] - 1e-8) & (interior < prof[2:] - 1e-8)
    assert not strict_min.any()
    assert np.all(prof <= fit.loglik + 1e-8)


@pytest.mark.slow
def test_consistency_at_scale():
    nodes = sobol_nodes(1024)
    ds = binomial_dataset(seed=11, K=200, theta0=-1.0, tau2=0.5)
    fit = fit_mle(ds, nodes)
    assert fit.converged
    assert abs(fit.beta_hat[0] - (-1.0)) < 0.05


def test_too_few_records_warns(caplog):
    ds = normal_dataset(Y[:2], V[:2], np.column_stack([np.ones(2), [0, 1]]))
    with caplog.at_level("WARNING"):
        fit_mle(ds, sobol_nodes(64))
    assert "unstable" in caplog.text
