import itertools

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import quad_vec
from scipy.special import gammaln, ndtr

from medbr.engine import Method, SolverOptions, compute_adjustments, solve
from medbr.errors import DomainError
from medbr.glm import GlmModel, GlmWorkspace, get_family, glm_closed_form_adjustments, glm_cumulant_set
from medbr.links import get_link
from medbr.selftest import max_rel_error, random_glm_workspace


def _binomial_ws(X, y, m, beta, link="logit"):
    fam = get_family("binomial")
    return GlmWorkspace(np.asarray(X, float), np.asarray(y, float), np.asarray(m, float), fam,
                        get_link(link, fam.links), beta)


def test_intercept_only_binomial_adjustments():
    mu = 0.3
    ws = _binomial_ws([[1.0]], [0.3], [10.0], [np.log(mu / (1 - mu))])
    mean_adj, phi_adj = glm_closed_form_adjustments(ws, Method.MEAN_BR)
    median_adj, _ = glm_closed_form_adjustments(ws, Method.MEDIAN_BR)
    assert phi_adj is None
    assert mean_adj[0] == pytest.approx(0.5 - mu, rel=1e-12)
    assert median_adj[0] == pytest.approx((1 - 2 * mu) / 6, rel=1e-12)


@pytest.mark.parametrize("link", ["logit", "probit"])
def test_symmetry_point(link):
    ws = _binomial_ws([[1.0]], [0.5], [10.0], [0.0], link)
    for method in (Method.MEAN_BR, Method.MEDIAN_BR):
        assert glm_closed_form_adjustments(ws, method)[0][0] == pytest.approx(0.0, abs=1e-15)


def test_random_binomial_design_matches_engine():
    rng = np.random.default_rng(8)
    n, p = 20, 3
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    m = rng.integers(1, 12, n).astype(float)
    ws = _binomial_ws(X, rng.binomial(m.astype(int), 0.4) / m, m, rng.normal(0, 0.5, p))
    bundle = compute_adjustments(glm_cumulant_set(ws))
    assert max_rel_error(bundle.medianAdj, glm_closed_form_adjustments(ws, Method.MEDIAN_BR)[0]) <= 1e-10
    assert max_rel_error(bundle.meanAdj, glm_closed_form_adjustments(ws, Method.MEAN_BR)[0]) <= 1e-10


@pytest.mark.parametrize("family", ["binomial", "gamma"])
def test_closed_forms_sweep(family):
    rng = np.random.default_rng(31)
    for _ in range(25):
        ws = random_glm_workspace(rng, family)
        bundle = compute_adjustments(glm_cumulant_set(ws))
        for method, generic in ((Method.MEDIAN_BR, bundle.medianAdj), (Method.MEAN_BR, bundle.meanAdj)):
            b, f = glm_closed_form_adjustments(ws, method)
            closed = b if f is None else np.append(b, f)
            assert max_rel_error(generic, closed) <= 1e-10
        assert ws.hat_sum == pytest.approx(ws.p, abs=1e-8)


def test_single_observation_cumulants_by_enumeration():
    m, mu = 10, 0.3
    ws = _binomial_ws([[1.0]], [0.3], [m], [np.log(mu / (1 - mu))])
    c = glm_cumulant_set(ws)
    y = np.arange(m + 1)
    pmf = stats.binom.pmf(y, m, mu)
    U = y - m * mu
    U11 = -m * mu * (1 - mu)
    assert c.info[0, 0] == pytest.approx(2.1, rel=1e-12)
    assert c.info[0, 0] == pytest.approx(np.sum(pmf * U * U), rel=1e-12)
    assert c.P[0, 0, 0] == pytest.approx(0.84, rel=1e-12)
    assert c.P[0, 0, 0] == pytest.approx(np.sum(pmf * U ** 3), rel=1e-12)
    assert c.Q[0, 0, 0] == pytest.approx(np.sum(pmf * U11 * U), abs=1e-12)


def test_probit_cumulants_by_enumeration():
    # non-canonical link, so Q_s does not vanish
    rng = np.random.default_rng(4)
    n, p = 3, 2
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    m = np.array([2, 3, 4])
    beta = np.array([0.2, -0.4])
    c = glm_cumulant_set(_binomial_ws(X, [0.5, 0.5, 0.5], m, beta, "probit"))
    eta = X @ beta
    mu = ndtr(eta)
    d = np.exp(-eta ** 2 / 2) / np.sqrt(2 * np.pi)
    dp = -eta * d
    info = np.zeros((p, p))
    P = np.zeros((p, p, p))
    Q = np.zeros((p, p, p))
    for ys in itertools.product(*(range(k + 1) for k in m)):
        ys = np.array(ys)
        prob = np.prod(stats.binom.pmf(ys, m, mu))
        l1 = ys / mu - (m - ys) / (1 - mu)
        l2 = -ys / mu ** 2 - (m - ys) / (1 - mu) ** 2
        U = X.T @ (l1 * d)
        H = X.T @ ((l2 * d ** 2 + l1 * dp)[:, None] * X)
        info += prob * np.outer(U, U)
        P += prob * np.einsum("s,t,u->stu", U, U, U)
        Q += prob * np.einsum("s,tu->stu", U, H)
    assert max_rel_error(c.info, info, floor=1e-12) < 1e-10
    assert max_rel_error(c.P, P, floor=1e-12) < 1e-10
    assert max_rel_error(c.Q, Q, floor=1e-12) < 1e-10


def test_gamma_information_by_quadrature():
    rng = np.random.default_rng(9)
    n = 5
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    w = rng.uniform(0.5, 2.0, n)
    beta, phi = np.array([0.3, 0.4]), 0.7
    model = GlmModel(X, rng.gamma(2.0, 1.0, n), w, "gamma")
    theta = np.append(beta, phi)
    info = model.fisher_info(theta)

    def logdens(th, i, y):
        mu = np.exp(X[i] @ th[:2])
        shape = w[i] / th[2]
        scale = mu / shape
        return (shape - 1) * np.log(y) - y / scale - gammaln(shape) - shape * np.log(scale)

    oracle = np.zeros((3, 3))
    h = 1e-6
    for i in range(n):
        mu = np.exp(X[i] @ beta)
        shape = w[i] / phi

        def score(y):
            out = np.empty(3)
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                out[k] = (logdens(theta + e, i, y) - logdens(theta - e, i, y)) / (2 * h)
            return out

        dens = stats.gamma(a=shape, scale=mu / shape)
        lo, hi = dens.ppf(1e-15), dens.ppf(1 - 1e-15)
        oracle += quad_vec(lambda y: np.outer(score(y), score(y)) * dens.pdf(y), lo, hi,
                           epsabs=1e-12, epsrel=1e-10)[0]
    assert np.max(np.abs(info - oracle)) < 1e-6 * np.max(np.abs(oracle))


@pytest.mark.parametrize("family", ["binomial", "poisson", "gamma"])
def test_fits_converge(family):
    rng = np.random.default_rng(21)
    n = 30
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    mu = np.exp(0.5 + 0.3 * X[:, 1])
    if family == "binomial":
        m = np.full(n, 6.0)
        y = rng.binomial(6, 1 / (1 + np.exp(-(0.2 + 0.5 * X[:, 1])))).astype(float)
        model = GlmModel(X, y, m, family)
    elif family == "poisson":
        model = GlmModel(X, rng.poisson(mu).astype(float), None, family)
    else:
        model = GlmModel(X, rng.gamma(3.0, mu / 3.0), None, family)
    for method in Method:
        fit = solve(model, SolverOptions(method))
        assert fit.converged, (family, method)
        assert model.workspace(fit.theta).hat_sum == pytest.approx(2.0, abs=1e-8)


def test_boundary_mean_rejected():
    with pytest.raises(DomainError):
        _binomial_ws([[1.0]], [0.5], [10.0], [800.0])


def test_unknown_family():
    with pytest.raises(ValueError):
        get_family("tweedie")
