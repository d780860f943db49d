"""Beta-binomial regression with covariates on the mean and the dispersion.

``Y_i`` is beta-binomial with ``m_i`` trials, mean ``m_i mu_i`` and
``Var(Y_i) = m_i mu_i (1 - mu_i) {1 + phi_i (m_i - 1)}``, where
``phi_i = 1 / (alpha_i + beta_i + 1)`` lies in (0, 1). All expectations of
likelihood derivatives are computed exactly by summing over ``y = 0..m_i``.
"""

from dataclasses import dataclass, field

import numpy as np

from .engine import CumulantSet, ParameterPoint, block_tensor
from .errors import DataError, DomainError, ResourceError
from .links import Link, get_link
from .special import log_gamma

MEAN_LINKS = ("logit", "probit")
PRECISION_LINKS = ("logit", "identity")
DEFAULT_TRIALS_CAP = 10000

L_NAMES = tuple(f"L{k}" for k in range(1, 17))


@dataclass(frozen=True)
class BetaBinData:
    y: np.ndarray
    m: np.ndarray
    X: np.ndarray
    Z: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        m = np.asarray(self.m, dtype=float).reshape(-1)
        if y.size != m.size:
            raise DataError("successes and trials must have the same length")
        if np.any(y != np.round(y)) or np.any(m != np.round(m)):
            raise DataError("successes and trials must be integers")
        bad = np.flatnonzero((m < 1) | (y < 0) | (y > m))
        if bad.size:
            raise DataError(f"need 0 <= y <= m and m >= 1; first offending row {bad[0] + 1}")
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        for name, A in (("X", X), ("Z", Z)):
            if A.ndim != 2 or A.shape[0] != y.size:
                raise DataError(f"{name} must have one row per observation")
            if A.shape[1] and np.linalg.matrix_rank(A) < A.shape[1]:
                raise DataError(f"{name} does not have full column rank")
        object.__setattr__(self, "y", y.astype(np.int64))
        object.__setattr__(self, "m", m.astype(np.int64))
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
class BetaBinLinks:
    mean_link: str = "logit"
    precision_link: str = "identity"

    def mean(self) -> Link:
        return get_link(self.mean_link, MEAN_LINKS)

    def precision(self) -> Link:
        return get_link(self.precision_link, PRECISION_LINKS, lower=0.0, upper=1.0)


def _check_params(mu, phi):
    if np.any(~((mu > 0) & (mu < 1))) or np.any(~((phi > 0) & (phi < 1))):
        raise DomainError("beta-binomial needs 0 < mu < 1 and 0 < phi < 1")


def _cumsum0(a):
    out = np.zeros(a.shape[:-1] + (a.shape[-1] + 1,))
    np.cumsum(a, axis=-1, out=out[..., 1:])
    return out


class _Outcomes:
    """All derivative values for every outcome ``y = 0..m_i``.

    Arrays have shape ``(n, M + 1)`` with ``M = max(m)``; entries with
    ``y > m_i`` carry zero probability.
    """

    def __init__(self, m, mu, phi, cap=DEFAULT_TRIALS_CAP, y=None):
        m = np.atleast_1d(np.asarray(m, dtype=np.int64))
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        phi = np.atleast_1d(np.asarray(phi, dtype=float))
        mu, phi, m = np.broadcast_arrays(mu, phi, m)
        _check_params(mu, phi)
        if np.any(m < 1):
            raise DomainError("trials must be at least 1")
        M = int(m.max())
        if M > cap:
            raise ResourceError(f"number of trials {M} exceeds the cap {cap}")
        j = np.arange(M, dtype=float)[None, :]
        mu_, phi_ = mu[:, None], phi[:, None]
        E = (1.0 - phi_) * mu_ + j * phi_
        F = (1.0 - mu_) * (1.0 - phi_) + j * phi_
        G = (1.0 - phi_) + j * phi_

        c_logE, c_logF, c_logG = _cumsum0(np.log(E)), _cumsum0(np.log(F)), _cumsum0(np.log(G))
        c_invE, c_invF = _cumsum0(1.0 / E), _cumsum0(1.0 / F)
        c_phiE, c_phiF = _cumsum0((j - mu_) / E), _cumsum0((j + mu_ - 1.0) / F)
        c_phiG = _cumsum0((j - 1.0) / G)
        c_invE2, c_invF2 = _cumsum0(1.0 / E ** 2), _cumsum0(1.0 / F ** 2)
        c_jE2, c_jF2 = _cumsum0(j / E ** 2), _cumsum0(j / F ** 2)
        c_ppE, c_ppF = _cumsum0((mu_ - j) ** 2 / E ** 2), _cumsum0((mu_ + j - 1.0) ** 2 / F ** 2)
        c_ppG = _cumsum0((j - 1.0) ** 2 / G ** 2)

        if y is None:
            yy = np.broadcast_to(np.arange(M + 1), (m.size, M + 1))
        else:
            yy = np.atleast_1d(np.asarray(y, dtype=np.int64))[:, None]
        self.valid = yy <= m[:, None]
        ya = np.where(self.valid, yy, 0)
        za = np.where(self.valid, m[:, None] - yy, 0)
        mm = m[:, None]

        def at(c, idx):
            return np.take_along_axis(c, idx, axis=1)

        def at_m(c):
            return np.take_along_axis(c, mm, axis=1)

        log_comb = log_gamma(mm + 1.0) - log_gamma(ya + 1.0) - log_gamma(za + 1.0)
        self.logpmf = log_comb + at(c_logE, ya) + at(c_logF, za) - at_m(c_logG)
        self.U_mu = (1.0 - phi_) * (at(c_invE, ya) - at(c_invF, za))
        self.U_phi = at(c_phiE, ya) + at(c_phiF, za) - at_m(c_phiG)
        self.U_mumu = -(1.0 - phi_) ** 2 * (at(c_invE2, ya) + at(c_invF2, za))
        self.U_muphi = -at(c_jE2, ya) + at(c_jF2, za)
        self.U_phiphi = -at(c_ppE, ya) - at(c_ppF, za) + at_m(c_ppG)
        self.prob = np.where(self.valid, np.exp(self.logpmf), 0.0)


def betabin_logpmf(y, m, mu, phi):
    """Log probability of ``y`` successes out of ``m``."""
    y = np.asarray(y)
    m = np.asarray(m)
    if np.any(y < 0) or np.any(y > m) or np.any(y != np.round(y)):
        raise DomainError("need integer 0 <= y <= m")
    shape = np.broadcast(y, m, mu, phi).shape
    yb, mb, mub, phib = (np.broadcast_to(v, shape).reshape(-1) for v in (y, m, mu, phi))
    out = _Outcomes(mb, mub, phib, y=yb).logpmf[:, 0]
    return float(out[0]) if shape == () else out.reshape(shape)


def betabin_derivatives(y, m, mu, phi):
    """``(U_mu, U_phi, U_mumu, U_muphi, U_phiphi)`` for one observation."""
    if not 0 <= y <= m or int(y) != y:
        raise DomainError("need integer 0 <= y <= m")
    o = _Outcomes([int(m)], [mu], [phi], y=[int(y)])
    return tuple(float(a[0, 0]) for a in (o.U_mu, o.U_phi, o.U_mumu, o.U_muphi, o.U_phiphi))


def _expectations(o):
    p = o.prob
    a, b = o.U_mu, o.U_phi
    aa, ab, bb = o.U_mumu, o.U_muphi, o.U_phiphi

    def E(x):
        return np.sum(p * np.where(o.valid, x, 0.0), axis=1)

    return np.array([
        E(aa), E(ab), E(bb),
        E(a ** 3), E(a * a * b), E(a * b * b), E(b ** 3),
        E(aa * a), E(a * a), E(a * ab), E(a * bb),
        E(a * b), E(b * aa), E(b * ab), E(b * bb), E(b * b),
    ])


def betabin_L_expectations(m, mu, phi, cap=DEFAULT_TRIALS_CAP):
    """Expectations ``L1..L16`` by exhaustive summation.

    Scalar arguments give a length-16 vector; vector arguments of length n
    give a ``(16, n)`` array.
    """
    scalar = np.ndim(m) == 0 and np.ndim(mu) == 0 and np.ndim(phi) == 0
    L = _expectations(_Outcomes(m, mu, phi, cap=cap))
    return L[:, 0] if scalar else L


class BetaBinWorkspace:
    """Link quantities and L-expectations at a given ``theta``."""

    def __init__(self, theta, data: BetaBinData, links: BetaBinLinks, cap=DEFAULT_TRIALS_CAP):
        theta = np.asarray(theta, dtype=float)
        if theta.size != data.p + data.q:
            raise ValueError("theta has the wrong length")
        self.eta = data.X @ theta[: data.p]
        self.zeta = data.Z @ theta[data.p:]
        self.mu, self.d1mu, self.d2mu = links.mean().evaluate(self.eta, "mean")
        self.phi, self.d1phi, self.d2phi = links.precision().evaluate(self.zeta, "dispersion")
        self.outcomes = _Outcomes(data.m, self.mu, self.phi, cap=cap)
        self.L = _expectations(self.outcomes)
        rows = np.arange(data.n)
        self.U_mu = self.outcomes.U_mu[rows, data.y]
        self.U_phi = self.outcomes.U_phi[rows, data.y]
        self.loglik_terms = self.outcomes.logpmf[rows, data.y]


def _fisher(ws, data):
    L1, L2, L3 = ws.L[0], ws.L[1], ws.L[2]
    X, Z = data.X, data.Z
    ibb = -X.T @ ((L1 * ws.d1mu ** 2)[:, None] * X)
    ibg = -X.T @ ((L2 * ws.d1mu * ws.d1phi)[:, None] * Z)
    igg = -Z.T @ ((L3 * ws.d1phi ** 2)[:, None] * Z)
    return np.block([[ibb, ibg], [ibg.T, igg]])


def _weights(ws):
    """Diagonal weights of the V, V', W and W' blocks."""
    L = ws.L
    a1, a2, b1, b2 = ws.d1mu, ws.d2mu, ws.d1phi, ws.d2phi
    V = (L[3] * a1 ** 3, L[4] * a1 ** 2 * b1, L[5] * a1 * b1 ** 2)
    Vp = (L[7] * a1 ** 3 + L[8] * a1 * a2, L[9] * a1 ** 2 * b1, L[10] * a1 * b1 ** 2 + L[11] * a1 * b2)
    W = (L[4] * a1 ** 2 * b1, L[5] * a1 * b1 ** 2, L[6] * b1 ** 3)
    Wp = (L[12] * a1 ** 2 * b1 + L[11] * b1 * a2, L[13] * a1 * b1 ** 2, L[14] * b1 ** 3 + L[15] * b1 * b2)
    return V, Vp, W, Wp


def _stack(data, mean_w, prec_w):
    return block_tensor(data.X, data.Z, mean_w, prec_w)


def betabin_cumulant_set(theta, data, links, raw=True, cap=DEFAULT_TRIALS_CAP):
    """Information plus ``P_s``/``Q_s`` and their combined forms."""
    ws = BetaBinWorkspace(theta, data, links, cap=cap)
    return _cumulants(ws, data, raw)


def _cumulants(ws, data, raw=True):
    V, Vp, W, Wp = _weights(ws)
    combine = lambda a, b, ca, cb: tuple(ca * x + cb * y for x, y in zip(a, b))
    pq_sum = _stack(data, combine(V, Vp, 1.0, 1.0), combine(W, Wp, 1.0, 1.0))
    pq_median = _stack(data, combine(V, Vp, 1.0 / 3.0, 0.5), combine(W, Wp, 1.0 / 3.0, 0.5))
    P = Q = None
    if raw:
        P = _stack(data, V, W)
        Q = _stack(data, Vp, Wp)
    return CumulantSet(info=_fisher(ws, data), P=P, Q=Q, pq_sum=pq_sum, pq_median=pq_median)


def betabin_loglik(theta, data, links):
    return float(np.sum(BetaBinWorkspace(theta, data, links).loglik_terms))


def betabin_score(theta, data, links):
    ws = BetaBinWorkspace(theta, data, links)
    return np.concatenate([data.X.T @ (ws.d1mu * ws.U_mu), data.Z.T @ (ws.d1phi * ws.U_phi)])


def betabin_default_start(data, links):
    """Least squares on empirical logits; moment estimate of the dispersion."""
    y, m = data.y.astype(float), data.m.astype(float)
    mean_link = links.mean()
    beta = np.linalg.lstsq(data.X, mean_link.link((y + 0.5) / (m + 1.0)), rcond=None)[0]
    mu = mean_link.inverse(data.X @ beta)
    multi = m > 1
    if multi.any():
        ratio = (y - m * mu) ** 2 / (m * mu * (1.0 - mu))
        phi0 = float(np.mean((ratio[multi] - 1.0) / (m[multi] - 1.0)))
    else:
        phi0 = 0.01
    phi0 = float(np.clip(phi0, 0.01, 0.9))
    gamma = np.zeros(data.q)
    if data.q:
        gamma[0] = float(links.precision().link(phi0))
    return ParameterPoint(np.concatenate([beta, gamma]), data.p, data.q)


@dataclass
class DivergenceReport:
    flag: bool
    components: list = field(default_factory=list)
    reason: str = ""


def detect_divergence(trace, linear_predictors=None, window=5, growth=1.2, se_growth=1.5,
                      eta_limit=30.0, components=None, halted=False):
    """Flag probable infinite estimates from a solver trace.

    A component is implicated when, over the last ``window`` iterates, its
    absolute value grows monotonically by at least ``growth`` per iteration
    while its standard error grows by at least ``se_growth``. Any fitted
    linear predictor beyond ``eta_limit`` in absolute value also raises the flag.

    ``halted`` marks a fit that stopped without converging. Under separation
    the estimate drifts roughly linearly while the information degenerates,
    so the solver halts before either threshold above is reached; for halted
    fits any monotone growth of ``|theta_r|`` with exploding standard errors
    is enough.
    """
    if len(trace) < 3:
        raise ValueError("divergence check needs a trace of at least 3 iterations")
    if halted:
        # the drift shows in full steps; halved steps near the stall would dilute the window
        full = [rec for rec in trace if rec.step_scale == 1.0]
        if len(full) >= 3:
            trace = full
    recent = trace[-window:]
    est = np.abs(np.array([rec.theta for rec in recent]))
    se = np.array([rec.std_errors for rec in recent])
    idx = range(est.shape[1]) if components is None else components
    min_ratio = min(growth, 1.0 + 1e-12) if halted else growth
    implicated = []
    with np.errstate(divide="ignore", invalid="ignore"):
        for r in idx:
            e_ratio = est[1:, r] / est[:-1, r]
            s_ratio = se[1:, r] / se[:-1, r]
            if np.all(e_ratio >= min_ratio) and np.all(s_ratio >= se_growth):
                implicated.append(int(r))
    reason = "estimate and standard error growth" if implicated else ""
    if linear_predictors is not None:
        eta = np.asarray(linear_predictors, dtype=float)
        if np.any(~np.isfinite(eta)) or np.any(np.abs(eta) > eta_limit):
            reason = (reason + "; " if reason else "") + f"|eta| above {eta_limit:g}"
            return DivergenceReport(True, implicated, reason)
    return DivergenceReport(bool(implicated), implicated, reason)


def check_fit_divergence(fit, model=None, **kwargs):
    """Run :func:`detect_divergence` on a fit and record the outcome on it."""
    if len(fit.trace) < 3:
        return DivergenceReport(False, [], "")
    eta = model.linear_predictors(fit.theta) if model is not None and hasattr(model, "linear_predictors") else None
    report = detect_divergence(fit.trace, eta, halted=not fit.converged, **kwargs)
    fit.divergence_flag = report.flag
    fit.divergence_components = list(report.components)
    return report


class BetaBinModel:
    """Beta-binomial regression as a model for :func:`medbr.engine.solve`."""

    def __init__(self, data: BetaBinData, links: BetaBinLinks = BetaBinLinks(), cap=DEFAULT_TRIALS_CAP):
        self.data = data
        self.links = links
        self.cap = cap
        self._cache = None
        links.mean()
        links.precision()
        if data.m.max() > cap:
            raise ResourceError(f"number of trials {data.m.max()} exceeds the cap {cap}")

    def parameter_dimension(self):
        return self.data.p, self.data.q

    def _ws(self, theta):
        # score and cumulants are requested at the same point on every iteration
        key = np.asarray(theta, dtype=float).tobytes()
        cache = self._cache  # read once so concurrent callers never mix entries
        if cache is None or cache[0] != key:
            cache = (key, BetaBinWorkspace(theta, self.data, self.links, self.cap))
            self._cache = cache
        return cache[1]

    def log_likelihood(self, theta):
        return float(np.sum(self._ws(theta).loglik_terms))

    def score(self, theta):
        ws = self._ws(theta)
        return np.concatenate([self.data.X.T @ (ws.d1mu * ws.U_mu), self.data.Z.T @ (ws.d1phi * ws.U_phi)])

    def fisher_info(self, theta):
        return _fisher(self._ws(theta), self.data)

    def cumulants(self, theta):
        return _cumulants(self._ws(theta), self.data, raw=False)

    def default_start(self):
        return betabin_default_start(self.data, self.links)

    def linear_predictors(self, theta):
        theta = np.asarray(theta, dtype=float)
        return self.data.X @ theta[: self.data.p]
