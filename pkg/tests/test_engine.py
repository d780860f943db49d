import time

import numpy as np
import pytest

from medbr.betabinom import BetaBinData, BetaBinLinks, BetaBinModel
from medbr.betareg import BetaRegData, BetaRegLinks, BetaRegModel
from medbr.engine import (CumulantSet, CumulantTensor, Method, ParameterPoint, SolverOptions,
                          compute_adjustments, pack_tensor, scaled_adjusted_score, solve, wald_interval)
from medbr.errors import SingularInformationError
from medbr.glm import GlmModel
from medbr.oracle import index_notation_oracle, random_tensor
from medbr.selftest import max_rel_error


def test_one_dimensional_bundle():
    b = compute_adjustments(CumulantSet(info=[[3.0]], P=[[[6.0]]], Q=[[[-3.0]]]))
    assert b.F1 == pytest.approx([1.0], rel=1e-15)
    assert b.meanAdj == pytest.approx([0.5], rel=1e-15)
    assert b.F2 == pytest.approx(np.array([[1 / 6]]), rel=1e-15)
    assert b.F2tilde == pytest.approx([1 / 18], rel=1e-15)
    assert b.medianAdj == pytest.approx([1 / 3], rel=1e-15)
    assert b.M1 == pytest.approx([1 / 9], rel=1e-15)


def test_zero_cumulants(rng):
    d = 3
    a = rng.standard_normal((d, d))
    b = compute_adjustments(CumulantSet(info=a @ a.T + np.eye(d), P=np.zeros((d, d, d)), Q=np.zeros((d, d, d))))
    for v in (b.F1, b.F2, b.meanAdj, b.medianAdj, b.M1):
        assert np.all(v == 0)


def test_combined_forms_match_raw(rng):
    t = random_tensor(4, rng)
    raw = compute_adjustments(pack_tensor(t))
    combined = compute_adjustments(CumulantSet(info=t.info, pq_sum=t.nu3 + t.nu21,
                                               pq_median=t.nu3 / 3 + t.nu21 / 2))
    assert max_rel_error(combined.medianAdj, raw.medianAdj) < 1e-13


def test_oracle_one_dimensional():
    t = CumulantTensor(np.array([[[6.0]]]), np.array([[[-3.0]]]), np.array([[3.0]]))
    m1 = index_notation_oracle(t)
    assert m1 == pytest.approx([1 / 9], rel=1e-15)
    assert 3 * m1[0] == pytest.approx(1 / 3, rel=1e-15)


def test_oracle_zero(rng):
    t = random_tensor(3, rng)
    t = CumulantTensor(np.zeros_like(t.nu3), np.zeros_like(t.nu21), t.info)
    assert np.all(index_notation_oracle(t) == 0)


def test_oracle_equivalence_sweep():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(240):
        t = random_tensor(2 + k % 3, rng)
        b = compute_adjustments(pack_tensor(t))
        worst = max(worst, max_rel_error(b.M1, index_notation_oracle(t)))
        assert max_rel_error(b.medianAdj, b.meanAdj - t.info @ b.F2tilde) <= 1e-12
        assert max_rel_error(b.medianAdj, t.info @ b.M1) <= 1e-12
    assert worst <= 1e-10
    assert time.perf_counter() - t0 < 5.0


def test_singular_information():
    with pytest.raises(SingularInformationError):
        compute_adjustments(CumulantSet(info=[[1.0, 1.0], [1.0, 1.0]], P=np.zeros((2, 2, 2)), Q=np.zeros((2, 2, 2))))
    with pytest.raises(SingularInformationError):
        compute_adjustments(CumulantSet(info=[[-1.0]], P=[[[0.0]]], Q=[[[0.0]]]))


class NormalMean:
    """Unit-variance normal mean: quadratic log-likelihood, vanishing third cumulants."""

    def __init__(self, y):
        self.y = np.asarray(y, dtype=float)

    def parameter_dimension(self):
        return 1, 0

    def log_likelihood(self, theta):
        return -0.5 * float(np.sum((self.y - theta[0]) ** 2))

    def score(self, theta):
        return np.array([np.sum(self.y - theta[0])])

    def cumulants(self, theta):
        return CumulantSet(info=[[self.y.size]], P=np.zeros((1, 1, 1)), Q=np.zeros((1, 1, 1)))

    def default_start(self):
        return ParameterPoint([0.0], 1, 0)


@pytest.mark.parametrize("method", list(Method))
def test_quadratic_model_one_step(method):
    y = np.array([0.2, 1.0, 1.5, 2.1, 1.2])
    fit = solve(NormalMean(y), SolverOptions(method))
    assert fit.converged and fit.iterations == 1
    assert fit.theta[0] == pytest.approx(1.2, abs=1e-14)
    assert fit.std_errors[0] == pytest.approx(1 / np.sqrt(5), rel=1e-14)


@pytest.mark.parametrize("method,expected", [
    (Method.ML, np.log(3 / 7)),
    (Method.MEAN_BR, np.log(3.5 / 7.5)),
    (Method.MEDIAN_BR, np.log((3 + 1 / 6) / (7 + 1 / 6))),
])
def test_binomial_closed_forms(method, expected):
    model = GlmModel(np.ones((1, 1)), [3.0], [10.0], "binomial")
    fit = solve(model, SolverOptions(method))
    assert fit.converged
    assert abs(fit.theta[0] - expected) < 1e-6
    assert np.max(np.abs(scaled_adjusted_score(model, fit.theta, method))) < 1e-8


def _betareg_model(rng, n=30):
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    Z = np.column_stack([np.ones(n), rng.uniform(-1, 1, n)])
    mu = 1 / (1 + np.exp(-(0.5 + 0.8 * X[:, 1])))
    phi = np.exp(2.0 + 0.5 * Z[:, 1])
    y = rng.beta(mu * phi, (1 - mu) * phi)
    return BetaRegModel(BetaRegData(y, X, Z), BetaRegLinks())


def _betabin_model(rng, n=25):
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    Z = np.ones((n, 1))
    m = rng.integers(3, 12, n)
    mu = 1 / (1 + np.exp(-(-0.3 + 0.7 * X[:, 1])))
    y = rng.binomial(m, rng.beta(mu * 3, (1 - mu) * 3))
    return BetaBinModel(BetaBinData(y, m, X, Z), BetaBinLinks())


@pytest.mark.parametrize("maker", [_betareg_model, _betabin_model])
@pytest.mark.parametrize("method", [Method.MEAN_BR, Method.MEDIAN_BR])
def test_mean_median_identity_on_fit_iterates(maker, method):
    model = maker(np.random.default_rng(7))
    fit = solve(model, SolverOptions(method))
    assert fit.converged
    for rec in fit.trace:
        c = model.cumulants(rec.theta)
        b = compute_adjustments(c)
        assert max_rel_error(b.medianAdj, b.meanAdj - c.info @ b.F2tilde, floor=1e-12) <= 1e-12
        assert max_rel_error(b.medianAdj, c.info @ b.M1, floor=1e-12) <= 1e-12


@pytest.mark.parametrize("method", list(Method))
def test_linear_equivariance(method):
    rng = np.random.default_rng(11)
    base = _betareg_model(rng)
    c = -2.5
    X2 = base.data.X.copy()
    X2[:, 1] *= c
    scaled = BetaRegModel(BetaRegData(base.data.y, X2, base.data.Z), base.links)
    opts = SolverOptions(method, tolerance=1e-12)
    a, b = solve(base, opts), solve(scaled, opts)
    assert a.converged and b.converged
    expected = a.theta.copy()
    expected[1] /= c
    assert np.max(np.abs(b.theta - expected)) < 1e-8


def test_converged_fit_satisfies_tolerance():
    model = _betabin_model(np.random.default_rng(3))
    for method in Method:
        fit = solve(model, SolverOptions(method, tolerance=1e-9))
        assert fit.converged
        assert np.max(np.abs(scaled_adjusted_score(model, fit.theta, method))) < 1e-9
        assert np.allclose(fit.std_errors, np.sqrt(np.diag(fit.vcov)))
        assert np.all(np.linalg.eigvalsh(fit.vcov) > 0)


def test_iteration_limit_is_not_an_exception():
    model = _betareg_model(np.random.default_rng(5))
    fit = solve(model, SolverOptions(Method.ML, max_iterations=1, tolerance=1e-300))
    assert not fit.converged
    assert fit.stop_reason == "iteration limit"


def _fit(estimate, se):
    return type("F", (), {"estimate": ParameterPoint([estimate], 1, 0), "std_errors": np.array([se]),
                          "converged": True})()


def test_wald_examples():
    lo, hi = wald_interval(_fit(0.0, 1.0), 0, 0.95)
    assert (lo, hi) == pytest.approx((-1.959964, 1.959964), abs=1e-6)
    lo, hi = wald_interval(_fit(2.055, 0.858), 0, 0.95)
    assert (round(lo, 3), round(hi, 3)) == (0.373, 3.737)
    lo, hi = wald_interval(_fit(1.0, 2.0), 0, 0.5)
    assert (lo, hi) == pytest.approx((1 - 2 * 0.674490, 1 + 2 * 0.674490), abs=1e-6)


def test_wald_errors():
    with pytest.raises(IndexError):
        wald_interval(_fit(0.0, 1.0), 1)
    f = _fit(0.0, 1.0)
    f.converged = False
    with pytest.raises(ValueError):
        wald_interval(f, 0)


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(tolerance=0)
    with pytest.raises(ValueError):
        SolverOptions(max_iterations=0)
    with pytest.raises(ValueError):
        Method.parse("bogus")
    assert Method.parse("MEDIAN_BR") is Method.MEDIAN_BR


def test_parameter_point_validation():
    with pytest.raises(ValueError):
        ParameterPoint([1.0, 2.0], 1, 0)
    with pytest.raises(ValueError):
        ParameterPoint([np.nan], 1, 0)
