"""Generalized linear models in exponential dispersion form.

Besides being fittable through the generic engine, this module computes the
mean and median adjustments in closed form, which gives an independent check
on :func:`medbr.engine.compute_adjustments`.

Binomial responses are given as successes ``y`` out of ``m`` trials; the
other families use ``m`` as observation weights (default 1).
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .engine import CumulantSet, Method, ParameterPoint
from .errors import DataError, DomainError
from .links import get_link
from .special import log_gamma, polygamma


@dataclass(frozen=True)
class Family:
    name: str
    links: tuple
    variance: Callable
    variance_deriv: Callable
    fixed_dispersion: bool
    mean_lower: float = 0.0
    mean_upper: float = np.inf
    # derivatives of the dispersion cumulant function a(e), estimated-dispersion families only
    a2: Optional[Callable] = None
    a3: Optional[Callable] = None


def _gamma_a(e):
    return 2.0 * log_gamma(-e) + 2.0 * e * np.log(-e)


def _gamma_a1(e):
    return -2.0 * polygamma(0, -e) + 2.0 * np.log(-e) + 2.0


def _gamma_a2(e):
    return 2.0 * polygamma(1, -e) + 2.0 / e


def _gamma_a3(e):
    return -2.0 * polygamma(2, -e) - 2.0 / (e * e)


FAMILIES = {
    "binomial": Family("binomial", ("logit", "probit"), lambda mu: mu * (1.0 - mu),
                       lambda mu: 1.0 - 2.0 * mu, True, 0.0, 1.0),
    "poisson": Family("poisson", ("log",), lambda mu: mu, lambda mu: np.ones_like(mu), True),
    "gamma": Family("gamma", ("log",), lambda mu: mu * mu, lambda mu: 2.0 * mu, False,
                    a2=_gamma_a2, a3=_gamma_a3),
}


def get_family(name):
    try:
        return FAMILIES[name.lower()]
    except KeyError:
        raise ValueError(f"unsupported family {name!r}; choose from {', '.join(FAMILIES)}") from None


class GlmWorkspace:
    """Quantities of a GLM evaluated at ``(beta, phi)``.

    ``y`` is on the mean scale (proportions for the binomial family).
    """

    def __init__(self, X, y, m, family, link, beta, phi=1.0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.m = np.asarray(m, dtype=float)
        self.family = family
        self.link = link
        self.beta = np.asarray(beta, dtype=float)
        self.phi = float(phi)
        if self.phi <= 0 or not np.isfinite(self.phi):
            raise DomainError("dispersion must be positive")
        n, p = self.X.shape
        self.n, self.p = n, p

        self.eta = self.X @ self.beta
        mu = link.inverse(self.eta)
        if not np.all(np.isfinite(mu)) or np.any(mu <= family.mean_lower) or np.any(mu >= family.mean_upper):
            raise DomainError("fitted mean on the boundary of the mean space")
        self.mu = mu
        self.d = link.d1(self.eta)
        self.dprime = link.d2(self.eta)
        self.v = family.variance(mu)
        self.vprime = family.variance_deriv(mu)
        self.w = self.m * self.d ** 2 / self.v

        xtwx = self.X.T @ (self.w[:, None] * self.X)
        self.xtwx_inv = cho_solve(cho_factor(xtwx), np.eye(p))
        # hat values: diag of X (X'WX)^-1 X' W
        self.hat = np.einsum("ij,jk,ik->i", self.X, self.xtwx_inv, self.X) * self.w
        self.xi = self.hat * self.dprime / (2.0 * self.d * self.w)

        # htilde[r, i]: diag of X G_r X' W with G_r = [i_bb^-1]_r [i_bb^-1]_r' / (phi i^rr)
        ibb_inv = self.phi * self.xtwx_inv
        cols = ibb_inv.T  # row r is [i_bb^-1]_r
        irr = np.diag(ibb_inv)
        proj = self.X @ cols.T  # proj[i, r] = x_i' [i_bb^-1]_r
        self.htilde = (proj ** 2).T / (self.phi * irr)[:, None] * self.w[None, :]

        if not family.fixed_dispersion:
            e = -self.m / self.phi
            self.a2 = family.a2(e)
            self.a3 = family.a3(e)
        else:
            self.a2 = self.a3 = None

    @property
    def estimates_dispersion(self):
        return not self.family.fixed_dispersion

    @property
    def hat_sum(self):
        return float(self.hat.sum())


def glm_cumulant_set(ws: GlmWorkspace) -> CumulantSet:
    """Fisher information and ``P_s``, ``Q_s`` from the GLM block formulas."""
    X, w, phi, n, p = ws.X, ws.w, ws.phi, ws.n, ws.p
    d = p + (1 if ws.estimates_dispersion else 0)
    info = np.zeros((d, d))
    P = np.zeros((d, d, d))
    Q = np.zeros((d, d, d))
    info[:p, :p] = X.T @ (w[:, None] * X) / phi

    ones = np.ones(n)
    for s in range(p):
        o1 = X[:, s] * ws.d * ws.vprime / (ws.v * phi)
        o2 = X[:, s] / phi ** 2
        o3 = X[:, s] * ws.dprime / (ws.d * phi)
        P[s, :p, :p] = X.T @ ((w * o1)[:, None] * X)
        Q[s, :p, :p] = -X.T @ ((w * (o1 - o3))[:, None] * X)
        if d > p:
            cross = X.T @ (w * o2 * ones)
            P[s, :p, p] = P[s, p, :p] = cross
            Q[s, :p, p] = Q[s, p, :p] = -cross

    if d > p:
        m, a2, a3 = ws.m, ws.a2, ws.a3
        info[p, p] = np.sum(m ** 2 * a2) / (2.0 * phi ** 4)
        P[p, :p, :p] = X.T @ (w[:, None] * X) / phi ** 2
        P[p, p, p] = np.sum(m ** 3 * a3) / (2.0 * phi ** 6)
        Q[p, p, p] = -np.sum(m ** 2 * a2) / phi ** 5
    return CumulantSet(info=info, P=P, Q=Q)


def glm_closed_form_adjustments(ws: GlmWorkspace, method):
    """Closed-form ``(beta_adjustment, phi_adjustment)``.

    ``phi_adjustment`` is ``None`` for fixed-dispersion families.
    """
    method = Method.parse(method)
    if method is Method.ML:
        return np.zeros(ws.p), (0.0 if ws.estimates_dispersion else None)
    X, w, p, phi = ws.X, ws.w, ws.p, ws.phi
    if method is Method.MEDIAN_BR:
        g = ws.d * ws.vprime / (6.0 * ws.v) - ws.dprime / (2.0 * ws.d)
        # u_r = [(X'WX)^-1]_r' X' (htilde_r * g)
        inner = X.T @ (ws.htilde * g[None, :]).T  # column r = X' (htilde_r * g)
        u = np.einsum("jr,jr->r", ws.xtwx_inv, inner)
        beta_adj = X.T @ (w * (ws.xi + X @ u))
    else:
        beta_adj = X.T @ (w * ws.xi)

    if not ws.estimates_dispersion:
        return beta_adj, None
    ratio = np.sum(ws.m ** 3 * ws.a3) / np.sum(ws.m ** 2 * ws.a2)
    if method is Method.MEDIAN_BR:
        phi_adj = p / (2.0 * phi) + ratio / (6.0 * phi ** 2)
    else:
        phi_adj = (p - 2.0) / (2.0 * phi) + ratio / (2.0 * phi ** 2)
    return beta_adj, phi_adj


class GlmModel:
    """A GLM as a model for :func:`medbr.engine.solve`.

    The parameter is ``beta`` for binomial and Poisson, and ``(beta, phi)``
    for the gamma family, with ``phi`` on its natural scale.
    """

    def __init__(self, X, y, m=None, family="binomial", link=None):
        self.family = get_family(family) if isinstance(family, str) else family
        self.link = get_link(link or self.family.links[0], self.family.links)
        self.X = np.asarray(X, dtype=float)
        if self.X.ndim != 2:
            raise DataError("design matrix must be two-dimensional")
        n, p = self.X.shape
        y = np.asarray(y, dtype=float)
        self.m = np.ones(n) if m is None else np.asarray(m, dtype=float)
        if y.shape != (n,) or self.m.shape != (n,):
            raise DataError("response and weights must match the design rows")
        if np.linalg.matrix_rank(self.X) < p:
            raise DataError("design matrix is rank deficient")
        if self.family.name == "binomial":
            if np.any(y < 0) or np.any(y > self.m) or np.any(self.m <= 0):
                raise DataError("binomial responses need 0 <= y <= m and m > 0")
            self.y = y / self.m
            self.successes = y
        else:
            if self.family.name == "poisson" and np.any(y < 0):
                raise DataError("Poisson responses must be non-negative")
            if self.family.name == "gamma" and np.any(y <= 0):
                raise DataError("gamma responses must be positive")
            self.y = y
        self.p = p

    def parameter_dimension(self):
        return (self.p, 0 if self.family.fixed_dispersion else 1)

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.family.fixed_dispersion:
            return theta, 1.0
        return theta[: self.p], float(theta[self.p])

    def workspace(self, theta):
        beta, phi = self._split(theta)
        return GlmWorkspace(self.X, self.y, self.m, self.family, self.link, beta, phi)

    def log_likelihood(self, theta):
        beta, phi = self._split(theta)
        if phi <= 0:
            raise DomainError("dispersion must be positive")
        mu = self.link.inverse(self.X @ beta)
        y, m = self.y, self.m
        name = self.family.name
        if name == "binomial":
            s = self.successes
            comb = log_gamma(m + 1.0) - log_gamma(s + 1.0) - log_gamma(m - s + 1.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                ll = np.where(s > 0, s * np.log(mu), 0.0) + np.where(m - s > 0, (m - s) * np.log1p(-mu), 0.0)
            return float(np.sum(comb + ll))
        if name == "poisson":
            return float(np.sum(m * (y * np.log(mu) - mu) - log_gamma(y + 1.0)))
        nu = m / phi
        return float(np.sum(nu * (-y / mu - np.log(mu) + np.log(y)) - 0.5 * _gamma_a(-nu) - np.log(y)))

    def score(self, theta):
        ws = self.workspace(theta)
        u_beta = self.X.T @ (ws.m * ws.d * (ws.y - ws.mu) / ws.v) / ws.phi
        if self.family.fixed_dispersion:
            return u_beta
        phi, m, y, mu = ws.phi, ws.m, ws.y, ws.mu
        # y*theta - b(theta) - c1(y) for the gamma family
        a_term = -y / mu - np.log(mu) + np.log(y)
        u_phi = np.sum(-m / phi ** 2 * a_term - m / (2.0 * phi ** 2) * _gamma_a1(-m / phi))
        return np.append(u_beta, u_phi)

    def fisher_info(self, theta):
        return glm_cumulant_set(self.workspace(theta)).info

    def cumulants(self, theta):
        return glm_cumulant_set(self.workspace(theta))

    def default_start(self):
        y = self.y
        if self.family.name == "binomial":
            z = (self.successes + 0.5) / (self.m + 1.0)
        elif self.family.name == "poisson":
            z = y + 0.5
        else:
            z = y
        beta = np.linalg.lstsq(self.X, self.link.link(z), rcond=None)[0]
        if self.family.fixed_dispersion:
            return ParameterPoint(beta, self.p, 0)
        mu = self.link.inverse(self.X @ beta)
        n = y.size
        pearson = np.sum(self.m * (y - mu) ** 2 / self.family.variance(mu)) / max(n - self.p, 1)
        return ParameterPoint(np.append(beta, max(pearson, 1e-3)), self.p, 1)
