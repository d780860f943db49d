"""Embedded oracle checks, run by ``medbr selftest``."""

import time
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .betabinom import betabin_L_expectations, betabin_logpmf
from .betareg import betareg_logdensity
from .engine import compute_adjustments, pack_tensor
from .glm import GlmWorkspace, get_family, glm_closed_form_adjustments, glm_cumulant_set
from .links import get_link
from .oracle import index_notation_oracle, random_tensor


def max_rel_error(a, b, floor=1e-8):
    """Largest componentwise relative difference, with a floor on the reference scale.

    The floor keeps components that are zero up to rounding from dominating:
    the denominator is ``max(|b_i|, floor * max(1, max|b|))``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.abs(b), floor * max(1.0, float(np.max(np.abs(b))) if b.size else 1.0))
    return float(np.max(np.abs(a - b) / scale)) if b.size else 0.0


@dataclass
class GroupResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} cases={self.cases:<4d} worst={self.worst:.2e} tol={self.tolerance:.0e} ({self.seconds:.2f}s)"


def engine_equivalence(n_instances=200, seed=1, tol=1e-10):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_instances):
        t = random_tensor(2 + k % 3, rng)
        worst = max(worst, max_rel_error(compute_adjustments(pack_tensor(t)).M1, index_notation_oracle(t)))
    return GroupResult("engine-equivalence", worst <= tol, worst, tol, n_instances)


def mean_median_identity(n_instances=200, seed=2, tol=1e-12):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_instances):
        t = random_tensor(2 + k % 3, rng)
        b = compute_adjustments(pack_tensor(t))
        ref = b.meanAdj - t.info @ b.F2tilde
        worst = max(worst, max_rel_error(b.medianAdj, ref), max_rel_error(b.medianAdj, t.info @ b.M1))
    return GroupResult("mean-median-identity", worst <= tol, worst, tol, n_instances)


def random_glm_workspace(rng, family="binomial"):
    n = int(rng.integers(8, 26))
    p = int(rng.integers(1, 5))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = rng.normal(0.0, 0.5, p)
    fam = get_family(family)
    link = get_link(fam.links[0], fam.links)
    if family == "binomial":
        m = rng.integers(1, 15, n).astype(float)
        y = rng.binomial(m.astype(int), 0.4) / m
        return GlmWorkspace(X, y, m, fam, link, beta, 1.0)
    m = rng.uniform(0.5, 3.0, n)
    y = rng.gamma(2.0, 1.0, n)
    return GlmWorkspace(X, y, m, fam, link, beta, float(rng.uniform(0.3, 2.0)))


def glm_closed_form(n_binomial=50, n_gamma=20, seed=3, tol=1e-10):
    from .engine import Method

    rng = np.random.default_rng(seed)
    worst = 0.0
    for family, count in (("binomial", n_binomial), ("gamma", n_gamma)):
        for _ in range(count):
            ws = random_glm_workspace(rng, family)
            bundle = compute_adjustments(glm_cumulant_set(ws))
            for method, generic in ((Method.MEDIAN_BR, bundle.medianAdj), (Method.MEAN_BR, bundle.meanAdj)):
                beta_adj, phi_adj = glm_closed_form_adjustments(ws, method)
                closed = beta_adj if phi_adj is None else np.append(beta_adj, phi_adj)
                worst = max(worst, max_rel_error(generic, closed))
    return GroupResult("glm-closed-form", worst <= tol, worst, tol, n_binomial + n_gamma)


def pmf_normalization(tol_pmf=1e-12, tol_density=1e-10):
    worst = 0.0
    cases = 0
    for m in (1, 2, 5, 17, 50):
        for mu in (0.05, 0.3, 0.5, 0.8):
            for phi in (0.01, 0.2, 0.6, 0.95):
                total = np.sum(np.exp(betabin_logpmf(np.arange(m + 1), m, mu, phi)))
                worst = max(worst, abs(total - 1.0) / tol_pmf)
                cases += 1
    for mu, phi in ((0.7, 5.0), (0.5, 2.0), (0.2, 30.0)):
        dens = lambda y: np.exp(betareg_logdensity(y, mu, phi))
        total = sum(quad(dens, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)[0] for a, b in ((0.0, mu), (mu, 1.0)))
        worst = max(worst, abs(total - 1.0) / tol_density)
        cases += 1
    # reported as a multiple of the tolerance so the two checks share one scale
    return GroupResult("pmf-normalization", worst <= 1.0, worst, 1.0, cases)


def bartlett_identities(tol=1e-10):
    worst = 0.0
    cases = 0
    for m in (1, 3, 7, 12):
        for mu in (0.1, 0.4, 0.75):
            for phi in (0.05, 0.25, 0.7):
                L = betabin_L_expectations(m, mu, phi)
                # U_phi vanishes identically when m = 1; entries that small are
                # compared on the scale of the largest expectation
                floor = 1e-4 * np.max(np.abs(L))
                for a, b in ((0, 8), (1, 11), (2, 15)):
                    worst = max(worst, abs(L[a] + L[b]) / max(abs(L[a]), abs(L[b]), floor))
                cases += 1
    return GroupResult("bartlett-identities", worst <= tol, worst, tol, cases)


GROUPS = (engine_equivalence, mean_median_identity, glm_closed_form, pmf_normalization, bartlett_identities)


def run_all():
    results = []
    for group in GROUPS:
        t0 = time.perf_counter()
        res = group()
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
