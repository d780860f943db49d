"""Link functions with first and second derivatives of the inverse link."""

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri

from .errors import DomainError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class Link:
    """``inverse(eta)`` maps the linear predictor to the parameter;
    ``d1`` and ``d2`` are its first and second derivatives in ``eta``."""

    name: str
    link: Callable
    inverse: Callable
    d1: Callable
    d2: Callable
    lower: float = -np.inf
    upper: float = np.inf

    def check(self, value, what="parameter"):
        value = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(value)) or np.any(value <= self.lower) or np.any(value >= self.upper):
            raise DomainError(f"{what} outside ({self.lower}, {self.upper}) under {self.name} link")
        return value

    def evaluate(self, eta, what="parameter"):
        """Return ``(value, d1, d2)`` at ``eta`` after a domain check."""
        eta = np.asarray(eta, dtype=float)
        value = self.check(self.inverse(eta), what)
        return value, self.d1(eta), self.d2(eta)


def _logit_d1(eta):
    mu = expit(eta)
    return mu * (1.0 - mu)


def _logit_d2(eta):
    mu = expit(eta)
    return mu * (1.0 - mu) * (1.0 - 2.0 * mu)


def _probit_d1(eta):
    return np.exp(-0.5 * eta * eta) / _SQRT_2PI


def _probit_d2(eta):
    return -eta * _probit_d1(eta)


def logit_link(lower=0.0, upper=1.0):
    return Link("logit", logit, expit, _logit_d1, _logit_d2, lower, upper)


def probit_link():
    return Link("probit", ndtri, ndtr, _probit_d1, _probit_d2, 0.0, 1.0)


def log_link(lower=0.0, upper=np.inf):
    return Link("log", np.log, np.exp, np.exp, np.exp, lower, upper)


def identity_link(lower=-np.inf, upper=np.inf):
    return Link("identity", lambda x: np.asarray(x, dtype=float), lambda e: np.asarray(e, dtype=float),
                lambda e: np.ones_like(np.asarray(e, dtype=float)),
                lambda e: np.zeros_like(np.asarray(e, dtype=float)), lower, upper)


def get_link(name, allowed, lower=None, upper=None):
    """Look up a link by name for a parameter restricted to ``(lower, upper)``."""
    name = name.lower()
    if name not in allowed:
        raise ValueError(f"link {name!r} not available here; choose from {', '.join(allowed)}")
    if name == "logit":
        return logit_link()
    if name == "probit":
        return probit_link()
    if name == "log":
        return log_link()
    if name == "identity":
        return identity_link(-np.inf if lower is None else lower, np.inf if upper is None else upper)
    raise ValueError(f"unknown link {name!r}")
