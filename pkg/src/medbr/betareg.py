"""Beta regression with regression structures on the mean and the precision.

``y_i ~ Beta(phi_i mu_i, phi_i (1 - mu_i))`` with ``g1(mu_i) = x_i beta`` and
``g2(phi_i) = z_i gamma``; the parameter vector is ``theta = (beta, gamma)``.
"""

from dataclasses import dataclass

import numpy as np

from .engine import CumulantSet, ParameterPoint, block_tensor
from .errors import DataError, DomainError
from .links import Link, get_link
from .special import log_gamma, polygamma

MEAN_LINKS = ("logit", "probit")
PRECISION_LINKS = ("log", "identity")


def _full_rank(A, name):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DataError(f"{name} must be a two-dimensional design matrix")
    if A.shape[1] and np.linalg.matrix_rank(A) < A.shape[1]:
        raise DataError(f"{name} does not have full column rank")
    return A


@dataclass(frozen=True)
class BetaRegData:
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        bad = np.flatnonzero(~((y > 0.0) & (y < 1.0)))
        if bad.size:
            raise DataError(f"responses must lie strictly inside (0, 1); first offending row {bad[0] + 1}")
        X = _full_rank(self.X, "X")
        Z = _full_rank(self.Z, "Z")
        if X.shape[0] != y.size or Z.shape[0] != y.size:
            raise DataError("design matrices must have one row per response")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n(self):
        return self.y.size

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.Z.shape[1]


@dataclass(frozen=True)
class BetaRegLinks:
    mean_link: str = "logit"
    precision_link: str = "log"

    def mean(self) -> Link:
        return get_link(self.mean_link, MEAN_LINKS)

    def precision(self) -> Link:
        return get_link(self.precision_link, PRECISION_LINKS, lower=0.0)


def betareg_logdensity(y, mu, phi):
    """Log of the beta density with mean ``mu`` and precision ``phi``."""
    y, mu, phi = (np.asarray(v, dtype=float) for v in (y, mu, phi))
    if np.any(~((y > 0) & (y < 1))) or np.any(~((mu > 0) & (mu < 1))) or np.any(~(phi > 0)):
        raise DomainError("beta density needs 0 < y < 1, 0 < mu < 1 and phi > 0")
    a, b = phi * mu, phi * (1.0 - mu)
    out = (log_gamma(phi) - log_gamma(a) - log_gamma(b)
           + (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y))
    return float(out) if np.ndim(out) == 0 else out


class BetaRegWorkspace:
    """Per-observation quantities at a given ``theta``."""

    def __init__(self, theta, data: BetaRegData, links: BetaRegLinks):
        theta = np.asarray(theta, dtype=float)
        if theta.size != data.p + data.q:
            raise ValueError("theta has the wrong length")
        beta, gamma = theta[: data.p], theta[data.p:]
        self.mu, self.d1, self.d1p = links.mean().evaluate(data.X @ beta, "mean")
        self.phi, self.d2, self.d2p = links.precision().evaluate(data.Z @ gamma, "precision")
        mu, phi = self.mu, self.phi
        a, b = phi * mu, phi * (1.0 - mu)
        self.t = np.log(data.y)
        self.s = np.log1p(-data.y)
        n = mu.size
        args = np.concatenate([a, b, phi])
        psi0, psi1, psi2 = (np.split(polygamma(k, args), [n, 2 * n]) for k in (0, 1, 2))
        self.ET = psi0[0] - psi0[2]
        self.ES = psi0[1] - psi0[2]
        self.Tt = self.t - self.ET
        self.St = self.s - self.ES
        self.K2 = psi1[0] + psi1[1]
        self.K3 = psi2[0] - psi2[1]
        self.Psi1 = psi1[1]
        self.Psi2 = psi2[1]
        self.Om1 = psi1[2]
        self.Om2 = psi2[2]
        if np.any(self.K2 <= 0):
            raise DomainError("non-positive kappa_2")


def betareg_loglik(theta, data, links):
    ws = BetaRegWorkspace(theta, data, links)
    mu, phi = ws.mu, ws.phi
    return float(np.sum(phi * (1.0 - mu) * ws.s + phi * mu * ws.t + log_gamma(phi)
                        - log_gamma(phi * mu) - log_gamma(phi * (1.0 - mu))
                        - ws.t - ws.s))


def _score(ws, data):
    u_beta = data.X.T @ (ws.phi * ws.d1 * (ws.Tt - ws.St))
    u_gamma = data.Z.T @ (ws.d2 * (ws.mu * (ws.Tt - ws.St) + ws.St))
    return np.concatenate([u_beta, u_gamma])


def betareg_score(theta, data, links):
    return _score(BetaRegWorkspace(theta, data, links), data)


def betareg_observation_scores(theta, data, links):
    """Per-observation score contributions as an ``n x (p + q)`` array."""
    ws = BetaRegWorkspace(theta, data, links)
    u = ws.Tt - ws.St
    return np.hstack([(ws.phi * ws.d1 * u)[:, None] * data.X,
                      (ws.d2 * (ws.mu * u + ws.St))[:, None] * data.Z])


def _fisher(ws, data):
    X, Z = data.X, data.Z
    mu, phi, d1, d2 = ws.mu, ws.phi, ws.d1, ws.d2
    wbb = d1 * phi * ws.K2 * phi * d1
    wbg = d1 * phi * (mu * ws.K2 - ws.Psi1) * d2
    wgg = d2 * (mu ** 2 * ws.K2 + (1.0 - 2.0 * mu) * ws.Psi1 - ws.Om1) * d2
    ibb = X.T @ (wbb[:, None] * X)
    ibg = X.T @ (wbg[:, None] * Z)
    igg = Z.T @ (wgg[:, None] * Z)
    return np.block([[ibb, ibg], [ibg.T, igg]])


def betareg_fisher_info(theta, data, links):
    return _fisher(BetaRegWorkspace(theta, data, links), data)


def betareg_cumulant_set(theta, data, links):
    ws = BetaRegWorkspace(theta, data, links)
    return _cumulants(ws, data)


def _cumulants(ws, data):
    X, Z = data.X, data.Z
    mu, phi = ws.mu, ws.phi
    d1, d2, d1p, d2p = ws.d1, ws.d2, ws.d1p, ws.d2p
    K2, K3, Psi1, Psi2, Om1, Om2 = ws.K2, ws.K3, ws.Psi1, ws.Psi2, ws.Om1, ws.Om2

    # mean-parameter blocks V (P_s) and V' (Q_s)
    v_bb = phi ** 3 * d1 ** 3 * K3
    v_bg = phi ** 2 * d1 ** 2 * d2 * (mu * K3 + Psi2)
    v_gg = phi * d1 * d2 ** 2 * (mu ** 2 * K3 + 2.0 * mu * Psi2 - Psi2)
    vp_bb = phi ** 2 * d1 * d1p * K2
    vp_bg = phi * d1 ** 2 * d2 * K2
    vp_gg = phi * d1 * d2p * (mu * K2 - Psi1)

    # precision-parameter blocks W (P_{p+t}) and W' (Q_{p+t})
    w_bb = phi ** 2 * d1 ** 2 * d2 * (mu * K3 + Psi2)
    w_bg = phi * d1 * d2 ** 2 * (mu ** 2 * K3 + 2.0 * mu * Psi2 - Psi2)
    w_gg = d2 ** 3 * (mu ** 3 * K3 + (3.0 * mu ** 2 - 3.0 * mu + 1.0) * Psi2 - Om2)
    wp_bb = phi * d2 * d1p * (mu * K2 - Psi1)
    wp_bg = d1 * d2 ** 2 * (mu * K2 - Psi1)
    wp_gg = d2 * d2p * (mu ** 2 * K2 + Psi1 - 2.0 * mu * Psi1 - Om1)

    P = block_tensor(X, Z, (v_bb, v_bg, v_gg), (w_bb, w_bg, w_gg))
    Q = block_tensor(X, Z, (vp_bb, vp_bg, vp_gg), (wp_bb, wp_bg, wp_gg))
    return CumulantSet(info=_fisher(ws, data), P=P, Q=Q)


def betareg_default_start(data, links):
    """Least-squares start on boundary-shrunk responses."""
    n = data.n
    ystar = (data.y * (n - 1) + 0.5) / n
    mean_link = links.mean()
    beta = np.linalg.lstsq(data.X, mean_link.link(ystar), rcond=None)[0]
    mu = mean_link.inverse(data.X @ beta)
    mu = np.clip(mu, 1e-6, 1 - 1e-6)
    resid_var = np.sum((ystar - mu) ** 2) / max(n - data.p, 1)
    # Var(y) = mu (1 - mu) / (1 + phi)
    phi0 = max(np.mean(mu * (1.0 - mu)) / max(resid_var, 1e-12) - 1.0, 1e-2)
    gamma = np.zeros(data.q)
    if data.q:
        gamma[0] = float(links.precision().link(phi0))
    return ParameterPoint(np.concatenate([beta, gamma]), data.p, data.q)


class BetaRegModel:
    """Beta regression as a model for :func:`medbr.engine.solve`."""

    def __init__(self, data: BetaRegData, links: BetaRegLinks = BetaRegLinks()):
        self.data = data
        self.links = links
        self._cache = None
        links.mean()
        links.precision()

    def _ws(self, theta):
        key = np.asarray(theta, dtype=float).tobytes()
        cache = self._cache  # read once so concurrent callers never mix entries
        if cache is None or cache[0] != key:
            cache = (key, BetaRegWorkspace(theta, self.data, self.links))
            self._cache = cache
        return cache[1]

    def parameter_dimension(self):
        return self.data.p, self.data.q

    def log_likelihood(self, theta):
        return betareg_loglik(theta, self.data, self.links)

    def score(self, theta):
        return _score(self._ws(theta), self.data)

    def fisher_info(self, theta):
        return _fisher(self._ws(theta), self.data)

    def cumulants(self, theta):
        return _cumulants(self._ws(theta), self.data)

    def default_start(self):
        return betareg_default_start(self.data, self.links)

    def linear_predictors(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.data.X @ theta[: self.data.p]
